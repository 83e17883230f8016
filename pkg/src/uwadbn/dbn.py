"""Stacked RBMs: greedy pretraining, relative-activity de-noising, classification."""

from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .errors import ConfigurationError, InputError
from .pixelizer import DEFAULT_RESOLUTIONS, batch_depixelize, batch_features, feature_dim
from .rbm import RbmParams, TrainConfig, rbm_from_bytes, rbm_to_bytes, train_rbm

# named layer-size presets; the first entry is the visible dimension
PRESETS = {
    "desk-denoise": (875, 128),
    "desk-classify": (40, 128, 32),
    "paper-denoise": (875, 625, 312),
    "paper-classify": (40, 1250, 50),
}


@dataclass(frozen=True)
class DbnModel:
    layers: tuple
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InputError("a DBN needs at least one layer")
        for lower, upper in zip(layers, layers[1:]):
            if lower.n_hidden != upper.n_visible:
                raise InputError(
                    f"layer chaining broken: {lower.n_hidden} hidden units feed {upper.n_visible} visible units"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def layer_sizes(self) -> tuple:
        return (self.layers[0].n_visible,) + tuple(p.n_hidden for p in self.layers)

    @property
    def n_input(self) -> int:
        return self.layers[0].n_visible

    @property
    def n_top(self) -> int:
        return self.layers[-1].n_hidden


def _as_input(m: DbnModel, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != m.n_input:
        raise InputError(f"input has {v.shape[-1]} units, model expects {m.n_input}")
    return v


def train_greedy(layer_sizes, data, cfg: TrainConfig, log=None) -> tuple:
    """Greedy layer-wise CD training.

    Layer ``k`` (0-based) uses seed ``cfg.seed + k`` and trains on the
    mean-field activations of the layer below.  Returns ``(model, errors)``
    with one reconstruction-error history per layer.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise InputError("need at least a visible and one hidden size")
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if x.shape[1] != sizes[0]:
        raise InputError(f"data has {x.shape[1]} columns, first layer expects {sizes[0]}")
    layers, errors = [], []
    for k, n_hidden in enumerate(sizes[1:]):
        layer_cfg = replace(cfg, seed=cfg.seed + k)
        cb = None if log is None else (lambda ep, err, k=k: log(k, ep, err))
        p, errs = train_rbm(x, n_hidden, layer_cfg, log=cb)
        layers.append(p)
        errors.append(errs)
        x = expit(x @ p.W.T + p.c)
    meta = {"layer_sizes": list(sizes), "train_config": cfg.to_dict()}
    return DbnModel(tuple(layers), meta), errors


def upward_pass(m: DbnModel, v) -> list:
    """Mean-field activations of every hidden layer, bottom to top."""
    x = _as_input(m, v)
    acts = []
    for p in m.layers:
        x = expit(x @ p.W.T + p.c)
        acts.append(x)
    return acts


def downward_pass(m: DbnModel, top) -> np.ndarray:
    x = np.asarray(top, dtype=np.float64)
    if x.shape[-1] != m.n_top:
        raise InputError(f"top activations have {x.shape[-1]} units, model has {m.n_top}")
    for p in reversed(m.layers):
        x = expit(x @ p.W + p.b)
    return x


def compute_relative_activity(m: DbnModel, clean, noisy) -> np.ndarray:
    """Per top-layer node, the mean |activation(noisy) - activation(clean)|."""
    clean = np.atleast_2d(_as_input(m, clean))
    noisy = np.atleast_2d(_as_input(m, noisy))
    if clean.shape != noisy.shape:
        raise InputError("clean and noisy sets must pair up row for row")
    if clean.shape[0] == 0:
        raise InputError("relative activity needs at least one pair")
    return np.abs(upward_pass(m, noisy)[-1] - upward_pass(m, clean)[-1]).mean(axis=0)


@dataclass(frozen=True)
class DenoiseModel:
    base: DbnModel
    noise_nodes: np.ndarray
    neutral_values: np.ndarray
    activity_scores: np.ndarray
    frame_len: int = 40
    resolutions: tuple = DEFAULT_RESOLUTIONS

    def __post_init__(self):
        nodes = np.asarray(self.noise_nodes, dtype=np.int64)
        neutral = np.asarray(self.neutral_values, dtype=np.float64)
        if nodes.size and (nodes.min() < 0 or nodes.max() >= self.base.n_top):
            raise InputError("noise node index outside the top layer")
        if neutral.shape != nodes.shape or not np.all(np.isfinite(neutral)):
            raise InputError("need one finite neutral value per noise node")
        if feature_dim(self.frame_len, self.resolutions) != self.base.n_input:
            raise InputError("model input size does not match the pixelization layout")
        object.__setattr__(self, "noise_nodes", nodes)
        object.__setattr__(self, "neutral_values", neutral)
        object.__setattr__(self, "activity_scores", np.asarray(self.activity_scores, dtype=np.float64))
        object.__setattr__(self, "resolutions", tuple(tuple(r) for r in self.resolutions))


def build_denoise_model(
    m: DbnModel,
    scores,
    clean_data,
    quantile: float = 0.8,
    per_node_neutral: bool = False,
    frame_len: int = 40,
    resolutions=DEFAULT_RESOLUTIONS,
) -> DenoiseModel:
    """Mark nodes scoring strictly above the ``quantile`` of ``scores`` as noise.

    Neutral values are the mean clean-corpus activation of the noise nodes:
    one shared scalar by default, or one value per node.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (m.n_top,):
        raise InputError(f"expected {m.n_top} activity scores, got {scores.shape}")
    if not 0 < quantile <= 1:
        raise ConfigurationError("quantile must lie in (0, 1]")
    nodes = np.flatnonzero(scores > np.quantile(scores, quantile))
    if nodes.size == 0 or nodes.size == scores.size:
        warnings.warn(f"noise threshold selects {nodes.size} of {scores.size} nodes", stacklevel=2)
    if nodes.size:
        top = upward_pass(m, clean_data)[-1][:, nodes]
        neutral = top.mean(axis=0) if per_node_neutral else np.full(nodes.size, top.mean())
    else:
        neutral = np.zeros(0)
    return DenoiseModel(m, nodes, neutral, scores, frame_len, resolutions)


def reconstruct(dm: DenoiseModel, features) -> np.ndarray:
    """Soft visible reconstruction after neutralizing noise nodes."""
    top = upward_pass(dm.base, features)[-1].copy()
    if dm.noise_nodes.size:
        top[..., dm.noise_nodes] = dm.neutral_values
    return downward_pass(dm.base, top)


def denoise(dm: DenoiseModel, features) -> np.ndarray:
    """Reconstructed symbol waveform(s) in [-1, 1], ``frame_len`` samples each.

    ``features`` is one flattened multi-resolution frame set or a batch of them.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    rec = reconstruct(dm, np.atleast_2d(x))
    pix = dm.resolutions[0][0]
    z = batch_depixelize(rec, pix, dm.frame_len) * 2.0 - 1.0
    return z[0] if single else z


def denoise_segments(dm: DenoiseModel, s_norm) -> np.ndarray:
    """Pixelize normalized segments (rows) and de-noise them."""
    return denoise(dm, batch_features(np.atleast_2d(s_norm), dm.resolutions))


# ---------------------------------------------------------------------------
# classification


@dataclass(frozen=True)
class FineTuneConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    patience: int = 10
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ClassifierModel:
    base: DbnModel
    head_W: np.ndarray  # (n_labels, n_top)
    head_b: np.ndarray
    validation_accuracy: float = float("nan")

    def __post_init__(self):
        W = np.array(self.head_W, dtype=np.float64, ndmin=2)
        b = np.asarray(self.head_b, dtype=np.float64).ravel()
        if W.shape != (b.size, self.base.n_top):
            raise InputError(f"head shape {W.shape} does not fit top layer {self.base.n_top}")
        object.__setattr__(self, "head_W", W)
        object.__setattr__(self, "head_b", b)

    @property
    def n_labels(self) -> int:
        return self.head_b.size


def _forward(Ws, cs, head_W, head_b, x):
    acts = [x]
    for W, c in zip(Ws, cs):
        acts.append(expit(acts[-1] @ W.T + c))
    return acts, acts[-1] @ head_W.T + head_b


def _unzip(cm: ClassifierModel):
    return [p.W for p in cm.base.layers], [p.c for p in cm.base.layers]


def classifier_loss(cm: ClassifierModel, x, labels) -> float:
    """Mean cross-entropy of the labels under the model's softmax."""
    x = _as_input(cm.base, np.atleast_2d(x))
    _, logits = _forward(*_unzip(cm), cm.head_W, cm.head_b, x)
    return float(-log_softmax(logits, axis=1)[np.arange(len(labels)), labels].mean())


def _backprop(Ws, cs, head_W, head_b, x, labels):
    acts, logits = _forward(Ws, cs, head_W, head_b, x)
    delta = softmax(logits, axis=1)
    delta[np.arange(len(labels)), labels] -= 1.0
    delta /= len(labels)
    gW_head, gb_head = delta.T @ acts[-1], delta.sum(axis=0)
    back = delta @ head_W
    layer_grads = []
    for k in range(len(Ws) - 1, -1, -1):
        back = back * acts[k + 1] * (1.0 - acts[k + 1])
        layer_grads.append((back.T @ acts[k], back.sum(axis=0)))
        back = back @ Ws[k]
    return gW_head, gb_head, layer_grads[::-1]


def classifier_gradients(cm: ClassifierModel, x, labels):
    """Backprop gradients: ``(head_W, head_b, [(dW, dc) per layer])``."""
    x = _as_input(cm.base, np.atleast_2d(x))
    return _backprop(*_unzip(cm), cm.head_W, cm.head_b, x, np.asarray(labels))


def _accuracy(cm, x, labels):
    return float(np.mean(predict_labels(cm, x) == labels)) if len(labels) else float("nan")


def fine_tune_classifier(
    m: DbnModel,
    x,
    labels,
    n_labels: int,
    cfg: FineTuneConfig = FineTuneConfig(),
    validation=None,
) -> ClassifierModel:
    """Append a softmax head and train head plus stack on cross-entropy.

    With ``validation=(x_val, y_val)`` the parameters from the epoch with the
    best validation accuracy are kept, and training stops after ``patience``
    epochs without improvement.
    """
    x = _as_input(m, np.atleast_2d(x))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise InputError("one label per input row required")
    if labels.size and (labels.min() < 0 or labels.max() >= n_labels):
        raise InputError(f"labels must lie in [0, {n_labels})")
    rng = np.random.default_rng(cfg.seed)
    head_W = 0.01 * rng.standard_normal((n_labels, m.n_top))
    cm = ClassifierModel(m, head_W, np.zeros(n_labels))
    if validation is not None:
        x_val, y_val = _as_input(m, np.atleast_2d(validation[0])), np.asarray(validation[1])
    else:
        x_val, y_val = x, labels
    best, best_acc, stale = cm, _accuracy(cm, x_val, y_val), 0
    Ws = [p.W.copy() for p in m.layers]
    cs = [p.c.copy() for p in m.layers]
    hW, hb = cm.head_W.copy(), cm.head_b.copy()
    vel = None
    lr, mom = cfg.learning_rate, cfg.momentum
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            gW, gb, lg = _backprop(Ws, cs, hW, hb, x[idx], labels[idx])
            grads = [gW, gb] + [g for pair in lg for g in pair]
            if vel is None:
                vel = [np.zeros_like(g) for g in grads]
            vel = [mom * v - lr * g for v, g in zip(vel, grads)]
            hW += vel[0]
            hb += vel[1]
            for k in range(len(Ws)):
                Ws[k] += vel[2 + 2 * k]
                cs[k] += vel[3 + 2 * k]
        cur = _assemble(m, Ws, cs, hW, hb)
        acc = _accuracy(cur, x_val, y_val)
        if acc > best_acc:
            best, best_acc, stale = cur, acc, 0
        else:
            stale += 1
            if validation is not None and stale >= cfg.patience:
                break
    if validation is None:
        best = _assemble(m, Ws, cs, hW, hb)
        best_acc = _accuracy(best, x_val, y_val)
    return replace(best, validation_accuracy=best_acc)


def _assemble(m, Ws, cs, hW, hb) -> ClassifierModel:
    layers = tuple(RbmParams(W.copy(), p.b, c.copy()) for p, W, c in zip(m.layers, Ws, cs))
    return ClassifierModel(DbnModel(layers, m.metadata), hW.copy(), hb.copy())


def posteriors(cm: ClassifierModel, x) -> np.ndarray:
    x = _as_input(cm.base, x)
    _, logits = _forward(*_unzip(cm), cm.head_W, cm.head_b, np.atleast_2d(x))
    post = softmax(logits, axis=1)
    return post[0] if x.ndim == 1 else post


def predict_labels(cm: ClassifierModel, x) -> np.ndarray:
    x = _as_input(cm.base, np.atleast_2d(x))
    _, logits = _forward(*_unzip(cm), cm.head_W, cm.head_b, x)
    return np.argmax(logits, axis=1)  # ties resolve to the lowest label


def classify(cm: ClassifierModel, z):
    """Label and posterior for reconstructed waveform(s) ``z`` in [-1, 1]."""
    z = np.asarray(z, dtype=np.float64)
    post = posteriors(cm, (z + 1.0) / 2.0)
    return np.argmax(post, axis=-1), post


# ---------------------------------------------------------------------------
# container format: "DBN1", u32 JSON length, JSON, then u32-length-prefixed RBM1 blobs
# followed by optional named f64 arrays (u32 name length, name, u32 count, data)

_MAGIC = b"DBN1"


def _pack(meta: dict, layers, arrays: dict) -> bytes:
    out = io.BytesIO()
    head = json.dumps(meta, sort_keys=True).encode()
    out.write(_MAGIC + struct.pack("<I", len(head)) + head)
    out.write(struct.pack("<I", len(layers)))
    for p in layers:
        blob = rbm_to_bytes(p)
        out.write(struct.pack("<I", len(blob)) + blob)
    out.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f8").ravel()
        key = name.encode()
        out.write(struct.pack("<I", len(key)) + key + struct.pack("<I", data.size) + data.tobytes())
    return out.getvalue()


def _unpack(buf: bytes):
    if buf[:4] != _MAGIC:
        raise InputError("not a DBN1 container")
    (n,) = struct.unpack_from("<I", buf, 4)
    meta = json.loads(buf[8 : 8 + n])
    pos = 8 + n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    layers = []
    for _ in range(count):
        (size,) = struct.unpack_from("<I", buf, pos)
        layers.append(rbm_from_bytes(buf[pos + 4 : pos + 4 + size]))
        pos += 4 + size
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4 : pos + 4 + klen].decode()
        pos += 4 + klen
        (size,) = struct.unpack_from("<I", buf, pos)
        arrays[name] = np.frombuffer(buf, "<f8", size, pos + 4).astype(np.float64)
        pos += 4 + 8 * size
    return meta, layers, arrays


def denoise_to_bytes(dm: DenoiseModel, extra_meta: dict | None = None) -> bytes:
    meta = dict(dm.base.metadata)
    meta.update(extra_meta or {})
    meta.update(
        kind="denoise",
        layer_sizes=list(dm.base.layer_sizes),
        frame_len=dm.frame_len,
        resolutions=[list(r) for r in dm.resolutions],
        noise_nodes=dm.noise_nodes.tolist(),
    )
    arrays = {"neutral_values": dm.neutral_values, "activity_scores": dm.activity_scores}
    return _pack(meta, dm.base.layers, arrays)


def denoise_from_bytes(buf: bytes) -> DenoiseModel:
    meta, layers, arrays = _unpack(buf)
    if meta.get("kind") != "denoise":
        raise InputError("container does not hold a de-noising model")
    base = DbnModel(tuple(layers), meta)
    return DenoiseModel(
        base,
        np.asarray(meta["noise_nodes"], dtype=np.int64),
        arrays["neutral_values"],
        arrays["activity_scores"],
        meta["frame_len"],
        tuple(tuple(r) for r in meta["resolutions"]),
    )


def classifier_to_bytes(cm: ClassifierModel, extra_meta: dict | None = None) -> bytes:
    meta = dict(cm.base.metadata)
    meta.update(extra_meta or {})
    meta.update(
        kind="classifier",
        layer_sizes=list(cm.base.layer_sizes),
        n_labels=cm.n_labels,
        validation_accuracy=cm.validation_accuracy,
    )
    return _pack(meta, cm.base.layers, {"head_W": cm.head_W, "head_b": cm.head_b})


def classifier_from_bytes(buf: bytes) -> ClassifierModel:
    meta, layers, arrays = _unpack(buf)
    if meta.get("kind") != "classifier":
        raise InputError("container does not hold a classifier")
    n_labels = meta["n_labels"]
    return ClassifierModel(
        DbnModel(tuple(layers), meta),
        arrays["head_W"].reshape(n_labels, -1),
        arrays["head_b"],
        meta["validation_accuracy"],
    )


def save_model(model, path, extra_meta: dict | None = None):
    blob = (
        denoise_to_bytes(model, extra_meta)
        if isinstance(model, DenoiseModel)
        else classifier_to_bytes(model, extra_meta)
    )
    with open(path, "wb") as fh:
        fh.write(blob)


def load_model(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    meta, _, _ = _unpack(buf)
    return denoise_from_bytes(buf) if meta.get("kind") == "denoise" else classifier_from_bytes(buf)
