"""End-to-end comparison over the combined multipath and Doppler channel."""

from dataclasses import replace

from _common import log, outdir, parser
from uwadbn.dbn import save_model
from uwadbn.harness import ExperimentConfig, generate_dataset, provenance, run_ber_sweep, train_classify, train_denoise, write_meta

p = parser(__doc__, "results/overall")
p.add_argument("--symbols", type=int, default=5_000)
p.add_argument("--epochs", type=int, default=50)
p.add_argument("--sync", choices=["genie", "pilot"], default="genie")
p.add_argument("--no-compensation", action="store_true")
args = p.parse_args()
out = outdir(args.out)

cfg = ExperimentConfig(
    kind="overall",
    n_symbols=args.symbols,
    seed=args.seed,
    ebno_grid=(0.0, 5.0, 10.0, 15.0),
    methods=("mle", "mle+doppler-sync", "dbn-denoise+mle", "dbn"),
    trials=49,
    auto_extend=False,
    sync=args.sync,
    doppler_compensation=not args.no_compensation,
)
cfg = replace(cfg, denoise=replace(cfg.denoise, quantile=None, train=replace(cfg.denoise.train, epochs=args.epochs)))
data = generate_dataset(cfg)
log("training de-noiser")
dm = train_denoise(cfg, data)
log("training classifier")
cm = train_classify(cfg, data, dm)
log(f"classifier validation accuracy {cm.validation_accuracy:.3f}")
save_model(dm, out / "denoise.dbn", provenance(cfg))
save_model(cm, out / "classifier.dbn", provenance(cfg))
for r in run_ber_sweep(cfg, dm, cm, csv_path=out / "ber.csv"):
    log(f"{r.method:16s} {r.ebno_db:5.1f} dB  BER {r.ber:.4f} ({r.bits} bits)")
write_meta(out / "ber.csv", cfg, kind="sweep")
