"""Train the de-noising DBN and compare it with raw MLE demodulation."""

from dataclasses import replace

from _common import dump, log, outdir, parser
from uwadbn.dbn import save_model
from uwadbn.harness import (
    ExperimentConfig,
    generate_dataset,
    make_symbols,
    provenance,
    rms_improvement,
    run_ber_sweep,
    train_denoise,
)

import numpy as np

p = parser(__doc__, "results/denoise")
p.add_argument("--kind", default="awgn-denoise", choices=["awgn-denoise", "multipath-denoise", "doppler-denoise"])
p.add_argument("--symbols", type=int, default=10_000)
p.add_argument("--epochs", type=int, default=200)
p.add_argument("--quantile", type=float, default=None, help="noise-node quantile; omit to disable")
args = p.parse_args()
out = outdir(args.out)

cfg = ExperimentConfig(
    kind=args.kind,
    n_symbols=args.symbols,
    seed=args.seed,
    ebno_grid=(-10.0, -5.0, 0.0, 5.0, 10.0),
    methods=("mle", "dbn-denoise+mle"),
    trials=25,
    doppler_compensation=args.kind == "doppler-denoise",
)
cfg = replace(
    cfg,
    denoise=replace(cfg.denoise, quantile=args.quantile, train=replace(cfg.denoise.train, epochs=args.epochs)),
)
log(f"generating {cfg.n_symbols} symbols over the {cfg.channel} channel")
data = generate_dataset(cfg)
log("training")
dm = train_denoise(cfg, data, log=lambda layer, ep, err: ep % 25 == 0 and log(f"layer {layer} epoch {ep} recon {err:.4f}"))
save_model(dm, out / "denoise.dbn", provenance(cfg))

rms = {}
rng = np.random.default_rng([args.seed, 99])
for eb in cfg.ebno_grid:
    dn, raw = rms_improvement(dm, make_symbols(cfg, 500, eb, rng, first_index=10**7))
    rms[eb] = {"denoised": dn, "raw": raw}
    log(f"{eb:5.1f} dB  RMS de-noised {dn:.3f}  raw {raw:.3f}")
dump({str(k): v for k, v in rms.items()}, out / "rms.json")
for r in run_ber_sweep(cfg, dm, csv_path=out / "ber.csv"):
    log(f"{r.method:16s} {r.ebno_db:5.1f} dB  BER {r.ber:.3e}")
