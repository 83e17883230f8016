"""Experiment orchestration: datasets, model training, Monte-Carlo BER sweeps.

Every random draw descends from ``ExperimentConfig.seed`` through
``numpy.random.SeedSequence`` with fixed tags, so one master seed pins the
dataset, the trained models and the sweep results.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .channel import CHANNEL_PRESETS, DistributionSpec, apply_channel, energy_per_bit, sample_channel_params
from .dbn import (
    PRESETS,
    ClassifierModel,
    DenoiseModel,
    FineTuneConfig,
    build_denoise_model,
    classify,
    compute_relative_activity,
    denoise,
    fine_tune_classifier,
    train_greedy,
)
from .errors import ConfigurationError, DetectionError, EstimationError, InputError
from .pixelizer import DEFAULT_RESOLUTIONS, batch_features, feature_dim, normalize_rows
from .rbm import TrainConfig
from .receiver import ALPHA_RANGE, METHODS, RxConfig, Sync, compensate_doppler, detect_pilot, mle_labels, receive
from .waveforms import ModSpec, Waveform, bits_to_labels, build_frame, default_layout, labels_to_bits, modulate

KINDS = ("awgn-denoise", "multipath-denoise", "doppler-denoise", "classify-awgn", "overall")
DEFAULT_CHANNEL = {
    "awgn-denoise": "awgn",
    "multipath-denoise": "multipath",
    "doppler-denoise": "doppler",
    "classify-awgn": "awgn",
    "overall": "overall",
}
CSV_HEADER = ("method", "ebno_db", "bits", "errors", "ber", "seed", "wall_ms")
SPLITS = ("train", "val", "test")

# SeedSequence tags for the independent random streams
_TAG_DATA, _TAG_DENOISE, _TAG_CLASSIFY, _TAG_SWEEP, _TAG_SEARCH = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class DenoiseSettings:
    preset: str = "desk-denoise"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=200))
    quantile: float | None = 0.8  # None disables noise-node neutralization
    per_node_neutral: bool = False


@dataclass(frozen=True)
class ClassifySettings:
    preset: str = "desk-classify"
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50))
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "awgn-denoise"
    spec: ModSpec = field(default_factory=ModSpec)
    channel: str | None = None  # preset name; None picks the kind's default
    channel_spec: DistributionSpec | None = None  # explicit override of the preset
    n_symbols: int = 10_000
    split: tuple = (0.5, 0.2, 0.3)
    burst_symbols: int = 16
    train_ebno_db: tuple = (-10.0, 20.0)
    ebno_grid: tuple = (0.0, 4.0, 8.0)
    methods: tuple = ("mle",)
    trials: int = 10
    max_bits: int = 1_000_000
    auto_extend: bool = True
    sync: str = "genie"
    doppler_compensation: bool = False
    threshold: float = 0.18
    payload_bits: int = 416
    guard_s: float = 0.05
    denoise: DenoiseSettings = field(default_factory=DenoiseSettings)
    classify: ClassifySettings = field(default_factory=ClassifySettings)
    seed: int = 0
    record_timing: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigurationError("split fractions must be three non-negative numbers summing to 1")
        if not self.ebno_grid:
            raise ConfigurationError("EbNo grid must not be empty")
        if self.trials < 1:
            raise ConfigurationError("trial count must be at least 1")
        if self.n_symbols < 1 or self.burst_symbols < 1:
            raise ConfigurationError("symbol counts must be positive")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}; choose from {METHODS}")
        if self.sync not in ("genie", "pilot"):
            raise ConfigurationError("sync must be 'genie' or 'pilot'")
        name = self.channel or DEFAULT_CHANNEL[self.kind]
        if self.channel_spec is None and name not in CHANNEL_PRESETS:
            raise ConfigurationError(f"unknown channel preset {name!r}")
        for preset in (self.denoise.preset, self.classify.preset):
            if preset not in PRESETS:
                raise ConfigurationError(f"unknown model preset {preset!r}")
        object.__setattr__(self, "channel", name)
        for key in ("split", "train_ebno_db", "ebno_grid", "methods"):
            object.__setattr__(self, key, tuple(getattr(self, key)))

    @property
    def distribution(self) -> DistributionSpec:
        return self.channel_spec or CHANNEL_PRESETS[self.channel]

    @property
    def layout(self):
        return default_layout(self.spec, payload_bits=self.payload_bits, guard_s=self.guard_s)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        d["channel_spec"] = None if self.channel_spec is None else self.channel_spec.to_dict()
        return json.loads(json.dumps(d))  # tuples -> lists

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        if "spec" in d:
            d["spec"] = ModSpec(**d["spec"])
        if d.get("channel_spec") is not None:
            d["channel_spec"] = DistributionSpec.from_dict(d["channel_spec"])
        if "denoise" in d:
            dn = dict(d["denoise"])
            if "train" in dn:
                dn["train"] = TrainConfig(**dn["train"])
            d["denoise"] = DenoiseSettings(**dn)
        if "classify" in d:
            cl = dict(d["classify"])
            if "pretrain" in cl:
                cl["pretrain"] = TrainConfig(**cl["pretrain"])
            if "finetune" in cl:
                cl["finetune"] = FineTuneConfig(**cl["finetune"])
            d["classify"] = ClassifySettings(**cl)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def derive_seed(master: int, *tags) -> int:
    return int(np.random.SeedSequence([master, *tags]).generate_state(1)[0])


def _rng(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master, *tags]))


def git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def provenance(cfg: ExperimentConfig) -> dict:
    return {"version": __version__, "git_revision": git_revision(), "config_hash": cfg.hash(), "seed": cfg.seed}


def write_meta(path, cfg: ExperimentConfig, **extra):
    meta = provenance(cfg)
    meta.update(extra)
    Path(f"{path}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# symbol datasets


@dataclass(frozen=True)
class SymbolSet:
    """Aligned transmitted/received symbol segments."""

    index: np.ndarray  # global symbol index (splits occupy disjoint ranges)
    labels: np.ndarray
    clean: np.ndarray  # (n, samples_per_symbol)
    noisy: np.ndarray
    ebno_db: np.ndarray  # per symbol
    n_paths: np.ndarray  # per symbol

    def __len__(self):
        return self.labels.size

    _FIELDS = ("index", "labels", "clean", "noisy", "ebno_db", "n_paths")


def features(segments, resolutions=DEFAULT_RESOLUTIONS) -> np.ndarray:
    """Per-symbol min-max normalization followed by multi-resolution pixelization."""
    return batch_features(normalize_rows(np.atleast_2d(segments)), resolutions)


def make_symbols(cfg: ExperimentConfig, n: int, ebno_db, rng, first_index: int = 0) -> SymbolSet:
    """Transmit ``n`` random symbols in bursts through the configured channel.

    ``ebno_db`` is a scalar or a ``(low, high)`` range sampled uniformly per
    burst.  Received symbols are cut at their nominal transmit positions,
    after undoing the direct path's time scale when the config asks the DBN
    receiver to compensate Doppler (so training matches what it sees).
    """
    spec = cfg.spec
    sps, bps = spec.samples_per_symbol, spec.bits_per_symbol
    dist = cfg.distribution
    out = {k: [] for k in ("labels", "clean", "noisy", "ebno", "paths")}
    remaining = n
    while remaining > 0:
        k = min(cfg.burst_symbols, remaining)
        bits = rng.integers(0, 2, k * bps)
        tx = modulate(bits, spec)
        if np.ndim(ebno_db) == 0:
            eb_db = float(ebno_db)
        else:
            eb_db = float(rng.uniform(*ebno_db))
        params = sample_channel_params(dist, rng, n_samples=len(tx), fs_hz=spec.fs_hz, ebno_db=eb_db)
        rx = apply_channel(tx, params, rng, bit_rate=spec.rb_bits_per_s, eb=energy_per_bit(tx, spec.rb_bits_per_s))
        alpha = params.paths[0].doppler_alpha
        if cfg.doppler_compensation and alpha != 1.0:
            rx = compensate_doppler(rx, float(np.clip(alpha, *ALPHA_RANGE)))
        got = np.zeros(k * sps)
        m = min(got.size, len(rx))
        got[:m] = rx.samples[:m]
        out["labels"].append(bits_to_labels(bits, bps))
        out["clean"].append(tx.samples.reshape(k, sps))
        out["noisy"].append(got.reshape(k, sps))
        out["ebno"].append(np.full(k, eb_db))
        out["paths"].append(np.full(k, len(params.paths)))
        remaining -= k
    return SymbolSet(
        np.arange(first_index, first_index + n),
        np.concatenate(out["labels"]).astype(np.int64),
        np.concatenate(out["clean"]),
        np.concatenate(out["noisy"]),
        np.concatenate(out["ebno"]),
        np.concatenate(out["paths"]).astype(np.int64),
    )


def split_sizes(cfg: ExperimentConfig) -> tuple:
    n_train = int(round(cfg.n_symbols * cfg.split[0]))
    n_val = int(round(cfg.n_symbols * cfg.split[1]))
    return n_train, n_val, cfg.n_symbols - n_train - n_val


def generate_dataset(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Train/val/test symbol sets, each from its own seed stream.

    When ``out_dir`` is given, every array is written as ``<split>_<name>.npy``
    together with the packed pixel frames and a ``dataset.json`` descriptor.
    """
    sets, start = {}, 0
    for i, (name, n) in enumerate(zip(SPLITS, split_sizes(cfg))):
        sets[name] = make_symbols(cfg, n, cfg.train_ebno_db, _rng(cfg.seed, _TAG_DATA, i), start)
        start += n
    if out_dir is not None:
        save_dataset(sets, out_dir, cfg)
    return sets


def save_dataset(sets: dict, out_dir, cfg: ExperimentConfig):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, s in sets.items():
            for key in SymbolSet._FIELDS:
                np.save(out / f"{name}_{key}.npy", getattr(s, key), allow_pickle=False)
            for key in ("clean", "noisy"):
                frames = features(getattr(s, key)).astype(np.uint8) if len(s) else np.zeros((0, 0), np.uint8)
                np.save(out / f"{name}_{key}_frames.npy", np.packbits(frames, axis=1), allow_pickle=False)
        desc = provenance(cfg)
        desc.update(
            config=cfg.to_dict(),
            sizes={k: len(v) for k, v in sets.items()},
            feature_dim=feature_dim(cfg.spec.samples_per_symbol),
        )
        (out / "dataset.json").write_text(json.dumps(desc, indent=2, sort_keys=True))
    except OSError as exc:
        raise InputError(f"cannot write dataset to {out}: {exc}") from exc


def load_dataset(path) -> dict:
    base = Path(path)
    if not (base / "dataset.json").exists():
        raise InputError(f"{base} does not contain a dataset.json descriptor")
    sets = {}
    for name in SPLITS:
        arrays = {k: np.load(base / f"{name}_{k}.npy", allow_pickle=False) for k in SymbolSet._FIELDS}
        sets[name] = SymbolSet(**arrays)
    return sets


# ---------------------------------------------------------------------------
# training


def _sizes(preset: str, n_input: int) -> tuple:
    sizes = PRESETS[preset]
    if sizes[0] != n_input:
        raise ConfigurationError(f"preset {preset!r} expects {sizes[0]} inputs, data has {n_input}")
    return sizes


def train_denoise(cfg: ExperimentConfig, data: dict, log=None) -> DenoiseModel:
    """Pretrain the de-noising stack on received frames and select noise nodes."""
    train = data["train"]
    fn, fc = features(train.noisy), features(train.clean)
    settings = cfg.denoise
    tc = replace(settings.train, seed=derive_seed(cfg.seed, _TAG_DENOISE))
    m, _ = train_greedy(_sizes(settings.preset, fn.shape[1]), fn, tc, log=log)
    scores = compute_relative_activity(m, fc, fn)
    frame_len = cfg.spec.samples_per_symbol
    if settings.quantile is None:
        return DenoiseModel(m, [], [], scores, frame_len)
    return build_denoise_model(m, scores, fc, settings.quantile, settings.per_node_neutral, frame_len)


def classifier_inputs(dm: DenoiseModel | None, segments) -> np.ndarray:
    """Classifier input in [0, 1]: the de-noised waveform, or the raw one if no model."""
    if dm is None:
        return normalize_rows(np.atleast_2d(segments))
    return (denoise(dm, features(segments, dm.resolutions)) + 1.0) / 2.0


def train_classify(
    cfg: ExperimentConfig,
    data: dict,
    dm: DenoiseModel | None,
    *,
    layer_sizes=None,
    epochs: int | None = None,
    seed_tag=(),
) -> ClassifierModel:
    """Greedy pretraining on (de-noised) symbols, then supervised fine-tuning.

    ``epochs`` overrides both the pretraining and the fine-tuning budget.
    """
    settings = cfg.classify
    x = classifier_inputs(dm, data["train"].noisy)
    xv = classifier_inputs(dm, data["val"].noisy)
    sizes = tuple(layer_sizes) if layer_sizes else _sizes(settings.preset, x.shape[1])
    seed = derive_seed(cfg.seed, _TAG_CLASSIFY, *seed_tag)
    pre = replace(settings.pretrain, seed=seed)
    fine = replace(settings.finetune, seed=seed + 1)
    if epochs is not None:
        pre, fine = replace(pre, epochs=epochs), replace(fine, epochs=epochs)
    m, _ = train_greedy(sizes, x, pre)
    val = (xv, data["val"].labels) if len(data["val"]) else None
    return fine_tune_classifier(m, x, data["train"].labels, cfg.spec.n_labels, fine, validation=val)


# ---------------------------------------------------------------------------
# evaluation


def label_bit_errors(true_labels, pred_labels, bits_per_symbol: int) -> int:
    a = labels_to_bits(np.asarray(true_labels), bits_per_symbol)
    b = labels_to_bits(np.asarray(pred_labels), bits_per_symbol)
    return int(np.count_nonzero(a != b))


def symbol_predictions(cfg: ExperimentConfig, s: SymbolSet, method: str, dm=None, cm=None) -> np.ndarray:
    """Per-symbol labels from genie-aligned segments."""
    spec = cfg.spec
    if method in ("mle", "mle+doppler-sync"):
        return mle_labels(s.noisy.ravel(), spec)
    if dm is None:
        raise ConfigurationError(f"method {method!r} needs a de-noising model")
    z = denoise(dm, features(s.noisy, dm.resolutions))
    if method == "dbn-denoise+mle":
        return mle_labels(z.ravel(), spec)
    if cm is None:
        raise ConfigurationError("method 'dbn' needs a classifier model")
    return classify(cm, z)[0]


def rms_improvement(dm: DenoiseModel, s: SymbolSet) -> tuple:
    """Mean per-symbol RMS error of the de-noised and of the raw received waveforms.

    Both are compared to the clean symbol on the [-1, 1] scale the de-noiser emits.
    """
    z = denoise(dm, features(s.noisy, dm.resolutions))
    ref = s.clean / np.abs(s.clean).max(axis=1, keepdims=True)
    rms_dn = np.sqrt(np.mean((z - ref) ** 2, axis=1)).mean()
    rms_raw = np.sqrt(np.mean((s.noisy - s.clean) ** 2, axis=1)).mean()
    return float(rms_dn), float(rms_raw)


# ---------------------------------------------------------------------------
# frame-level BER sweeps


@dataclass(frozen=True)
class BerRecord:
    method: str
    ebno_db: float
    bits: int
    errors: int
    seed: int
    wall_ms: float = 0.0

    def __post_init__(self):
        if self.bits <= 0:
            raise InputError("a BER record needs at least one bit")

    @property
    def ber(self) -> float:
        return self.errors / self.bits

    def row(self) -> list:
        return [self.method, f"{self.ebno_db:g}", self.bits, self.errors, f"{self.ber:.6e}", self.seed, f"{self.wall_ms:.3f}"]


def ci_ok(errors: int, bits: int) -> bool:
    """95% binomial half-width within max(0.3 * ber, 5e-3)."""
    p = errors / bits
    return 1.96 * math.sqrt(p * (1 - p) / bits) <= max(0.3 * p, 5e-3)


def simulate_frame(cfg: ExperimentConfig, ebno_db: float, rng):
    """One transmitted frame through the channel.

    Returns ``(bits, received, genie_sync)``.
    """
    spec, layout = cfg.spec, cfg.layout
    bits = rng.integers(0, 2, layout.payload_bits).astype(np.uint8)
    payload = modulate(bits, spec)
    lead = int(rng.integers(100, 500))
    frame = build_frame(layout, payload).samples
    x = Waveform(np.concatenate([np.zeros(lead), frame, np.zeros(1000)]), spec.fs_hz)
    params = sample_channel_params(cfg.distribution, rng, n_samples=len(x), fs_hz=spec.fs_hz, ebno_db=ebno_db)
    rx = apply_channel(x, params, rng, bit_rate=spec.rb_bits_per_s, eb=energy_per_bit(payload, spec.rb_bits_per_s))
    alpha = params.paths[0].doppler_alpha
    return bits, rx, Sync(lead / alpha, alpha)


def run_ber_sweep(cfg: ExperimentConfig, dm=None, cm=None, csv_path=None, log=None) -> list:
    """Frame-level Monte-Carlo BER for every (method, EbNo) pair.

    All methods see the same frames (trial ``t`` at grid point ``g`` is seeded
    from ``(seed, g, t)``).  Trials extend beyond ``cfg.trials`` until every
    method meets the confidence rule or ``max_bits`` is reached.
    """
    rx_cfgs = {
        m: RxConfig(
            spec=cfg.spec,
            layout=cfg.layout,
            method=m,
            threshold=cfg.threshold,
            doppler_compensation=cfg.doppler_compensation,
        )
        for m in cfg.methods
    }
    records = []
    for g, ebno in enumerate(cfg.ebno_grid):
        errors = {m: 0 for m in cfg.methods}
        wall = {m: 0.0 for m in cfg.methods}
        bits_sent, trial = 0, 0
        while True:
            rng = _rng(cfg.seed, _TAG_SWEEP, g, trial)
            bits, rx, genie = simulate_frame(cfg, ebno, rng)
            detection, sync = None, genie
            if cfg.sync == "pilot":
                sync = None
                try:
                    detection = detect_pilot(rx, cfg.layout, cfg.threshold)
                except DetectionError:
                    detection = False
            for m in cfg.methods:
                t0 = time.perf_counter()
                if detection is False:
                    got = np.zeros_like(bits)
                else:
                    try:
                        got = receive(rx, rx_cfgs[m], dm, cm, detection=detection, sync=sync).bits
                    except EstimationError:
                        got = np.zeros_like(bits)
                wall[m] += (time.perf_counter() - t0) * 1e3
                errors[m] += int(np.count_nonzero(got != bits))
            bits_sent += bits.size
            trial += 1
            if trial < cfg.trials:
                continue
            if not cfg.auto_extend or bits_sent >= cfg.max_bits:
                break
            if all(ci_ok(errors[m], bits_sent) for m in cfg.methods):
                break
        for m in cfg.methods:
            w = wall[m] if cfg.record_timing else 0.0
            records.append(BerRecord(m, float(ebno), bits_sent, errors[m], cfg.seed, w))
            if log:
                log(records[-1])
    records.sort(key=lambda r: (r.method, r.ebno_db))
    if csv_path is not None:
        write_csv(records, csv_path)
    return records


def write_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        BerRecord(r["method"], float(r["ebno_db"]), int(r["bits"]), int(r["errors"]), int(r["seed"]), float(r["wall_ms"]))
        for r in rows
    ]


# ---------------------------------------------------------------------------
# structure search


@dataclass(frozen=True)
class StructureRecord:
    layer_sizes: tuple
    epochs: int
    bits: int
    errors: int
    seed: int
    wall_ms: float = 0.0

    @property
    def ber(self) -> float:
        return self.errors / self.bits


def run_structure_search(
    cfg: ExperimentConfig,
    structures,
    epoch_budgets,
    *,
    ebno_db: float | None = None,
    dm: DenoiseModel | None = None,
    use_denoiser: bool = True,
    data: dict | None = None,
) -> list:
    """Train one classifier per (structure, epoch budget) and score it on the test split.

    Data comes from ``cfg`` at the fixed ``ebno_db`` (default: the first grid
    point).  A de-noiser is trained first unless one is supplied or
    ``use_denoiser`` is false.  Results are sorted by (structure, epochs).
    """
    if data is None:
        ebno = cfg.ebno_grid[0] if ebno_db is None else ebno_db
        data = generate_dataset(replace(cfg, train_ebno_db=(ebno, ebno)))
    if use_denoiser and dm is None:
        dm = train_denoise(cfg, data)
    test = data["test"]
    bps = cfg.spec.bits_per_symbol
    out = []
    for si, sizes in enumerate(structures):
        for epochs in epoch_budgets:
            t0 = time.perf_counter()
            cm = train_classify(
                cfg, data, dm if use_denoiser else None, layer_sizes=sizes, epochs=epochs, seed_tag=(_TAG_SEARCH, si)
            )
            pred = classify(cm, classifier_inputs(dm if use_denoiser else None, test.noisy) * 2 - 1)[0]
            wall = (time.perf_counter() - t0) * 1e3 if cfg.record_timing else 0.0
            errs = label_bit_errors(test.labels, pred, bps)
            out.append(StructureRecord(tuple(sizes), int(epochs), len(test) * bps, errs, cfg.seed, wall))
    out.sort(key=lambda r: (r.layer_sizes, r.epochs))
    return out


def write_structure_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("layer_sizes", "epochs", "bits", "errors", "ber", "seed", "wall_ms"))
        for r in records:
            sizes = "-".join(str(s) for s in r.layer_sizes)
            w.writerow((sizes, r.epochs, r.bits, r.errors, f"{r.ber:.6e}", r.seed, f"{r.wall_ms:.3f}"))
