"""Binary restricted Boltzmann machine: energies, conditionals, exact oracles, CD-k.

Conventions: ``W`` is ``(n_hidden, n_visible)``, ``b`` the visible bias, ``c``
the hidden bias, so ``E(v, h) = -h.W.v - b.v - c.h``.  Functions taking ``v``
or ``h`` accept a single vector or a batch (rows).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logsumexp

from .errors import CapabilityError, InputError

MAX_ENUM_UNITS = 20


@dataclass(frozen=True)
class RbmParams:
    W: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64, ndmin=2)
        b = np.array(self.b, dtype=np.float64).ravel()
        c = np.array(self.c, dtype=np.float64).ravel()
        if W.shape != (c.size, b.size):
            raise InputError(f"W shape {W.shape} inconsistent with b ({b.size}) and c ({c.size})")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise InputError("RBM parameters must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def n_visible(self) -> int:
        return self.b.size

    @property
    def n_hidden(self) -> int:
        return self.c.size

    @classmethod
    def zeros(cls, n_visible, n_hidden):
        return cls(np.zeros((n_hidden, n_visible)), np.zeros(n_visible), np.zeros(n_hidden))

    @classmethod
    def random(cls, n_visible, n_hidden, rng, scale=0.01):
        return cls(scale * rng.standard_normal((n_hidden, n_visible)), np.zeros(n_visible), np.zeros(n_hidden))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 200
    cd_steps: int = 1
    momentum: float = 0.5
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InputError("learning rate must be non-negative")
        if self.batch_size < 1 or self.cd_steps < 1 or self.epochs < 0:
            raise InputError("batch size and CD steps must be positive, epochs non-negative")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InputError("weight decay must be non-negative")

    def to_dict(self):
        return asdict(self)


def _check_dims(p: RbmParams, v=None, h=None):
    if v is not None and np.shape(v)[-1] != p.n_visible:
        raise InputError(f"visible vector has {np.shape(v)[-1]} units, model has {p.n_visible}")
    if h is not None and np.shape(h)[-1] != p.n_hidden:
        raise InputError(f"hidden vector has {np.shape(h)[-1]} units, model has {p.n_hidden}")


def energy(p: RbmParams, v, h):
    v = np.asarray(v, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    _check_dims(p, v, h)
    interaction = np.einsum("...j,jk,...k->...", h, p.W, v)
    return -interaction - v @ p.b - h @ p.c


def free_energy(p: RbmParams, v):
    """``F(v) = -b.v - sum_j softplus(c_j + W_j.v)``, overflow-safe."""
    v = np.asarray(v, dtype=np.float64)
    _check_dims(p, v)
    pre = v @ p.W.T + p.c
    return -(v @ p.b) - np.logaddexp(0.0, pre).sum(axis=-1)


def prob_h_given_v(p: RbmParams, v):
    v = np.asarray(v, dtype=np.float64)
    _check_dims(p, v)
    return expit(v @ p.W.T + p.c)


def prob_v_given_h(p: RbmParams, h):
    h = np.asarray(h, dtype=np.float64)
    _check_dims(p, h=h)
    return expit(h @ p.W + p.b)


def bernoulli(probs, rng):
    return (rng.random(np.shape(probs)) < probs).astype(np.float64)


def gibbs_step(p: RbmParams, v, rng):
    """One block-Gibbs sweep ``v -> h -> v'``.

    Returns ``(h_sample, v_next, h_probs, v_probs)``.
    """
    h_probs = prob_h_given_v(p, v)
    h = bernoulli(h_probs, rng)
    v_probs = prob_v_given_h(p, h)
    return h, bernoulli(v_probs, rng), h_probs, v_probs


# ---------------------------------------------------------------------------
# exact (enumeration) routines for small models


def all_binary(n: int) -> np.ndarray:
    """Every binary vector of length ``n``, as rows, in lexicographic order."""
    if n == 0:
        return np.zeros((1, 0))
    return np.array(list(itertools.product((0.0, 1.0), repeat=n)))


def _require_enumerable(p: RbmParams):
    if p.n_visible + p.n_hidden > MAX_ENUM_UNITS:
        raise CapabilityError(
            f"exact enumeration over {p.n_visible + p.n_hidden} units exceeds {MAX_ENUM_UNITS}"
        )


def log_partition_function_exact(p: RbmParams) -> float:
    """``log Q`` by brute-force summation over every joint (v, h) state."""
    _require_enumerable(p)
    H = all_binary(p.n_hidden)
    terms = []
    for v in all_binary(p.n_visible):
        terms.append(-energy(p, np.broadcast_to(v, (len(H), v.size)), H))
    return float(logsumexp(np.concatenate(terms)))


def partition_function_exact(p: RbmParams) -> float:
    return float(np.exp(log_partition_function_exact(p)))


def joint_prob_exact(p: RbmParams, v, h) -> float:
    _require_enumerable(p)
    return float(np.exp(-energy(p, v, h) - log_partition_function_exact(p)))


def nll_exact(p: RbmParams, data) -> float:
    """Mean negative log marginal likelihood ``mean F(v) + log Q``."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    _require_enumerable(p)
    return float(free_energy(p, data).mean() + log_partition_function_exact(p))


def exact_gradient(p: RbmParams, data) -> RbmParams:
    """Gradient of ``nll_exact`` w.r.t. (W, b, c), returned in an ``RbmParams``.

    Data term uses ``E[h | v]``; the model term enumerates every visible
    state weighted by its exact marginal.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    _check_dims(p, data)
    _require_enumerable(p)
    ph_data = prob_h_given_v(p, data)
    V = all_binary(p.n_visible)
    logw = -free_energy(p, V)
    w = np.exp(logw - logsumexp(logw))
    ph_model = prob_h_given_v(p, V)
    gW = (ph_model.T * w) @ V - ph_data.T @ data / len(data)
    gb = w @ V - data.mean(axis=0)
    gc = w @ ph_model - ph_data.mean(axis=0)
    return RbmParams(gW, gb, gc)


# ---------------------------------------------------------------------------
# contrastive divergence


class CdResult(NamedTuple):
    params: RbmParams
    recon_error: float
    velocity: RbmParams


def cd_gradient(p: RbmParams, batch, k: int, rng):
    """CD-k estimate of the log-likelihood *ascent* direction, plus v1 probabilities.

    Visible inputs may be soft (probabilities); the positive phase uses them
    as-is.  Intermediate chain states are sampled, the final visible state
    enters the negative phase as probabilities.
    """
    v0 = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    h0_probs = prob_h_given_v(p, v0)
    h = bernoulli(h0_probs, rng)
    v1_probs = None
    for step in range(k):
        v = prob_v_given_h(p, h)
        if v1_probs is None:
            v1_probs = v
        if step + 1 < k:
            v = bernoulli(v, rng)
        h_probs = prob_h_given_v(p, v)
        if step + 1 < k:
            h = bernoulli(h_probs, rng)
    m = len(v0)
    gW = (h0_probs.T @ v0 - h_probs.T @ v) / m
    gb = (v0 - v).mean(axis=0)
    gc = (h0_probs - h_probs).mean(axis=0)
    return RbmParams(gW, gb, gc), v1_probs


def cd_update(p: RbmParams, batch, cfg: TrainConfig, rng, velocity: RbmParams | None = None) -> CdResult:
    """One CD-k step with momentum and L2 weight decay on ``W``.

    Returns the new parameters, the batch mean squared reconstruction error
    (``v0`` against ``P(v | h0)``), and the new velocity.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise InputError("empty training batch")
    _check_dims(p, batch)
    grad, v1_probs = cd_gradient(p, batch, cfg.cd_steps, rng)
    if velocity is None:
        velocity = RbmParams.zeros(p.n_visible, p.n_hidden)
    lr, mom = cfg.learning_rate, cfg.momentum
    vel = RbmParams(
        mom * velocity.W + lr * (grad.W - cfg.weight_decay * p.W),
        mom * velocity.b + lr * grad.b,
        mom * velocity.c + lr * grad.c,
    )
    new = RbmParams(p.W + vel.W, p.b + vel.b, p.c + vel.c)
    err = float(np.mean((batch - v1_probs) ** 2))
    return CdResult(new, err, vel)


def train_rbm(data, n_hidden: int, cfg: TrainConfig, log=None):
    """Train an RBM on ``data`` (rows in [0, 1]) with CD-k.

    Returns ``(params, per-epoch mean reconstruction errors)``.  Everything
    random flows from ``cfg.seed``.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise InputError("no training data")
    rng = np.random.default_rng(cfg.seed)
    n_visible = data.shape[1]
    p = RbmParams.random(n_visible, n_hidden, rng)
    mean = np.clip(data.mean(axis=0), 1e-3, 1 - 1e-3)
    p = replace(p, b=np.log(mean / (1 - mean)))
    velocity = None
    errors = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(data), cfg.batch_size):
            batch = data[order[start : start + cfg.batch_size]]
            p, err, velocity = cd_update(p, batch, cfg, rng, velocity)
            total += err * len(batch)
        errors.append(total / len(data))
        if log is not None:
            log(epoch, errors[-1])
    return p, errors


# ---------------------------------------------------------------------------
# serialization: "RBM1", u32 n_hidden, u32 n_visible, then f64 W (row-major), b, c

_MAGIC = b"RBM1"


def rbm_to_bytes(p: RbmParams) -> bytes:
    head = _MAGIC + struct.pack("<II", p.n_hidden, p.n_visible)
    body = np.concatenate([p.W.ravel(), p.b, p.c]).astype("<f8").tobytes()
    return head + body


def rbm_from_bytes(buf: bytes) -> RbmParams:
    if buf[:4] != _MAGIC:
        raise InputError("not an RBM1 blob")
    n_h, n_v = struct.unpack_from("<II", buf, 4)
    vals = np.frombuffer(buf, "<f8", n_h * n_v + n_v + n_h, 12).astype(np.float64)
    W = vals[: n_h * n_v].reshape(n_h, n_v)
    return RbmParams(W, vals[n_h * n_v : n_h * n_v + n_v], vals[n_h * n_v + n_v :])


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_rbm(p: RbmParams, path, metadata: dict | None = None):
    """Write the binary blob and a ``<path>.json`` metadata sidecar."""
    with open(path, "wb") as fh:
        fh.write(rbm_to_bytes(p))
    meta = dict(metadata or {})
    meta.update(n_visible=p.n_visible, n_hidden=p.n_hidden, format="RBM1")
    with open(f"{path}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_rbm(path) -> RbmParams:
    with open(path, "rb") as fh:
        return rbm_from_bytes(fh.read())
