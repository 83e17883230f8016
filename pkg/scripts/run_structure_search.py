"""Classifier BER against layer sizes and training epochs at a fixed Eb/No."""

from _common import log, outdir, parser
from uwadbn.harness import ExperimentConfig, run_structure_search, write_meta, write_structure_csv

p = parser(__doc__, "results/structure_search")
p.add_argument("--ebno", type=float, default=0.0)
p.add_argument("--epochs", type=int, nargs="+", default=[3, 10, 30])
p.add_argument("--structures", nargs="+", default=["40-128-32", "40-64", "40-256-32"])
args = p.parse_args()
out = outdir(args.out)

cfg = ExperimentConfig(kind="classify-awgn", n_symbols=10_000, seed=args.seed)
structures = [tuple(int(v) for v in s.split("-")) for s in args.structures]
recs = run_structure_search(cfg, structures, args.epochs, ebno_db=args.ebno, use_denoiser=False)
write_structure_csv(recs, out / "structures.csv")
write_meta(out / "structures.csv", cfg, kind="structure-search")
for r in recs:
    log(f"{'-'.join(map(str, r.layer_sizes)):>10s}  epochs {r.epochs:3d}  BER {r.ber:.4f}")
