import argparse
import json
import time
from pathlib import Path


def parser(description, default_out):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=default_out, help="output directory")
    return p


def outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def log(msg):
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
