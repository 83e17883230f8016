"""Command-line entry point: ``python -m uwadbn.cli <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .dbn import load_model, save_model
from .errors import UwaError
from .harness import (
    ExperimentConfig,
    generate_dataset,
    load_dataset,
    provenance,
    run_ber_sweep,
    run_structure_search,
    train_classify,
    train_denoise,
    write_meta,
    write_structure_csv,
)
from .receiver import RxConfig, receive
from .waveforms import load_waveform


class UsageError(Exception):
    pass


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        cfg = ExperimentConfig()
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = ExperimentConfig.load(path)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _cmd_generate(args):
    cfg = _load_config(args)
    generate_dataset(cfg, args.out)


def _cmd_train_denoise(args):
    cfg = _load_config(args)
    dm = train_denoise(cfg, load_dataset(args.data))
    save_model(dm, args.out, provenance(cfg))
    write_meta(args.out, cfg, kind="denoise", noise_nodes=len(dm.noise_nodes))


def _cmd_train_classify(args):
    cfg = _load_config(args)
    dm = load_model(args.denoiser) if args.denoiser else None
    cm = train_classify(cfg, load_dataset(args.data), dm)
    save_model(cm, args.out, provenance(cfg))
    write_meta(args.out, cfg, kind="classifier", validation_accuracy=cm.validation_accuracy)


def _cmd_receive(args):
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    rx_cfg = RxConfig.from_dict(json.loads(path.read_text()))
    report = receive(load_waveform(args.input, rx_cfg.spec.fs_hz), rx_cfg)
    Path(args.out).write_text(report.to_json())


def _cmd_sweep(args):
    cfg = _load_config(args)
    dm = load_model(args.denoiser) if args.denoiser else None
    cm = load_model(args.classifier) if args.classifier else None
    run_ber_sweep(cfg, dm, cm, csv_path=args.out)
    write_meta(args.out, cfg, kind="sweep")


def _cmd_structure_search(args):
    cfg = _load_config(args)
    structures = [tuple(int(v) for v in s.split("-")) for s in args.structures]
    dm = load_model(args.denoiser) if args.denoiser else None
    records = run_structure_search(
        cfg, structures, args.epochs, ebno_db=args.ebno, dm=dm, use_denoiser=not args.raw
    )
    write_structure_csv(records, args.out)
    write_meta(args.out, cfg, kind="structure-search")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uwadbn", description="DBN receiver experiments")
    p.add_argument("--version", action="version", version=f"uwadbn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", required=True, help="output path")

    sp = sub.add_parser("generate", help="generate a train/val/test symbol dataset")
    common(sp)
    sp.set_defaults(func=_cmd_generate)

    sp = sub.add_parser("train-denoise", help="train the de-noising DBN")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.set_defaults(func=_cmd_train_denoise)

    sp = sub.add_parser("train-classify", help="train the classification DBN")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--denoiser", help="de-noising model feeding the classifier")
    sp.set_defaults(func=_cmd_train_classify)

    sp = sub.add_parser("receive", help="demodulate one recorded frame")
    sp.add_argument("--input", required=True, help="little-endian float32 samples")
    sp.add_argument("--config", required=True, help="receiver config JSON")
    sp.add_argument("--out", required=True, help="report JSON")
    sp.set_defaults(func=_cmd_receive)

    sp = sub.add_parser("sweep", help="Monte-Carlo BER sweep to CSV")
    common(sp)
    sp.add_argument("--denoiser")
    sp.add_argument("--classifier")
    sp.set_defaults(func=_cmd_sweep)

    sp = sub.add_parser("structure-search", help="BER versus layer sizes and epochs")
    common(sp)
    sp.add_argument("--structures", nargs="+", default=["40-128-32", "40-64"], help="e.g. 40-128-32")
    sp.add_argument("--epochs", nargs="+", type=int, default=[5, 50])
    sp.add_argument("--ebno", type=float, default=0.0)
    sp.add_argument("--denoiser")
    sp.add_argument("--raw", action="store_true", help="classify raw symbols, no de-noiser")
    sp.set_defaults(func=_cmd_structure_search)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    try:
        args.func(args)
    except UsageError as exc:
        print(f"uwadbn {args.command}: {exc}", file=sys.stderr)
        return 2
    except (UwaError, OSError, KeyError) as exc:
        print(f"uwadbn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
