"""MLE over AWGN against the closed-form BPSK error rate."""

import math

from scipy.special import erfc

from _common import log, outdir, parser
from uwadbn.harness import ExperimentConfig, run_ber_sweep, write_meta

args = parser(__doc__, "results/awgn_anchor").parse_args()
out = outdir(args.out)
cfg = ExperimentConfig(
    kind="awgn-denoise", ebno_grid=(0.0, 2.0, 4.0, 6.0, 8.0), methods=("mle",), trials=241, seed=args.seed
)
recs = run_ber_sweep(cfg, csv_path=out / "ber.csv")
write_meta(out / "ber.csv", cfg, kind="sweep")
for r in recs:
    p = 0.5 * erfc(math.sqrt(10 ** (r.ebno_db / 10)))
    sigma = math.sqrt(p * (1 - p) / r.bits)
    log(f"{r.ebno_db:4.1f} dB  measured {r.ber:.3e}  theory {p:.3e}  z={(r.ber - p) / sigma:+.2f}  ({r.bits} bits)")
