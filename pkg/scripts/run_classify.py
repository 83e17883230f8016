"""Train the classification DBN on AWGN BPSK and compare it with MLE."""

import math

import numpy as np
from scipy.special import erfc

from _common import dump, log, outdir, parser
from uwadbn.dbn import classify, save_model
from uwadbn.harness import (
    ExperimentConfig,
    classifier_inputs,
    generate_dataset,
    label_bit_errors,
    make_symbols,
    provenance,
    train_classify,
)
from uwadbn.receiver import mle_labels

p = parser(__doc__, "results/classify")
p.add_argument("--symbols", type=int, default=10_000)
p.add_argument("--test-symbols", type=int, default=200_000)
args = p.parse_args()
out = outdir(args.out)

cfg = ExperimentConfig(kind="classify-awgn", n_symbols=args.symbols, seed=args.seed)
cm = train_classify(cfg, generate_dataset(cfg), None)
save_model(cm, out / "classifier.dbn", provenance(cfg))
log(f"validation accuracy {cm.validation_accuracy:.4f}")

rows = []
rng = np.random.default_rng([args.seed, 77])
for eb in (0.0, 2.0, 4.0, 6.0, 8.0, 10.0):
    s = make_symbols(cfg, args.test_symbols, eb, rng, first_index=10**7)
    dbn = label_bit_errors(s.labels, classify(cm, classifier_inputs(None, s.noisy) * 2 - 1)[0], 1) / len(s)
    mle = label_bit_errors(s.labels, mle_labels(s.noisy.ravel(), cfg.spec), 1) / len(s)
    theory = 0.5 * erfc(math.sqrt(10 ** (eb / 10)))
    rows.append({"ebno_db": eb, "dbn": dbn, "mle": mle, "theory": theory})
    log(f"{eb:4.1f} dB  DBN {dbn:.2e}  MLE {mle:.2e}  theory {theory:.2e}")
dump(rows, out / "ber.json")
