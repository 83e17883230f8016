"""Stochastic underwater acoustic channel: AWGN, multipath, Doppler time-scaling.

A path acts on the analytic signal, so its phase rotation is well defined on a
real passband waveform.  Doppler uses ``s(t) = x(alpha * t)`` with
``alpha = 1`` meaning no motion.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.signal import hilbert
from scipy.special import i0

from .errors import InputError
from .waveforms import Waveform

ALPHA_RANGE = (0.5, 1.5)
NOISELESS_EBNO_DB = 200.0  # at or above this, AWGN is skipped entirely


# ---------------------------------------------------------------------------
# band-limited resampling


def resample(samples, alpha: float, half_width: int = 32, beta: float = 8.0) -> np.ndarray:
    """Return ``y[n] = x(alpha * n)`` using a Kaiser-windowed sinc kernel.

    When ``alpha > 1`` the kernel cutoff drops to ``1/alpha`` of Nyquist so the
    compression does not alias.  Output length is ``round(len(x) / alpha)``.
    Samples outside the input are treated as zero.
    """
    x = np.asarray(samples, dtype=np.float64)
    n_out = int(round(x.size / alpha))
    cutoff = min(1.0, 1.0 / alpha)
    hw = int(math.ceil(half_width / cutoff))
    offsets = np.arange(-hw + 1, hw + 1)
    out = np.empty(n_out)
    padded = np.concatenate([np.zeros(hw), x, np.zeros(hw + 1)])
    for start in range(0, n_out, 4096):
        pos = alpha * np.arange(start, min(start + 4096, n_out))
        base = np.floor(pos).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        d = pos[:, None] - idx
        taper = np.clip(1.0 - (d / hw) ** 2, 0.0, None)
        kernel = cutoff * np.sinc(cutoff * d) * i0(beta * np.sqrt(taper)) / i0(beta)
        out[start : start + pos.size] = np.einsum("ij,ij->i", kernel, padded[idx + hw])
    return out


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class PathParams:
    amp: float = 1.0
    phase_traj: tuple = (0.0,)
    delay_samples: int = 0
    doppler_alpha: float = 1.0

    def __post_init__(self):
        if not 0 < self.amp <= 1:
            raise InputError(f"path amplitude must lie in (0, 1], got {self.amp}")
        if not ALPHA_RANGE[0] <= self.doppler_alpha <= ALPHA_RANGE[1]:
            raise InputError(f"doppler alpha {self.doppler_alpha} outside {ALPHA_RANGE}")
        if self.delay_samples < 0:
            raise InputError("path delay must be non-negative")
        object.__setattr__(self, "phase_traj", tuple(float(p) for p in self.phase_traj))
        object.__setattr__(self, "delay_samples", int(self.delay_samples))


@dataclass(frozen=True)
class ChannelParams:
    paths: tuple
    ebno_db: float = math.inf
    f_delta_hz: float = 2000.0

    def __post_init__(self):
        paths = tuple(self.paths)
        if not paths:
            raise InputError("channel needs at least one path")
        if paths[0].delay_samples != 0:
            raise InputError("the first (direct) path must have zero delay")
        delays = [p.delay_samples for p in paths]
        if delays != sorted(delays):
            raise InputError("paths must be sorted by ascending delay")
        if self.f_delta_hz <= 0:
            raise InputError("f_delta must be positive")
        object.__setattr__(self, "paths", paths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["paths"] = [asdict(p) for p in self.paths]
        for p in d["paths"]:
            p["phase_traj"] = list(p["phase_traj"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelParams":
        paths = tuple(PathParams(**p) for p in d["paths"])
        return cls(paths, d.get("ebno_db", math.inf), d.get("f_delta_hz", 2000.0))


@dataclass(frozen=True)
class DistributionSpec:
    """Random-variable description of a family of channels.

    Amplitude and Doppler are clamped normals, phase is a wrapped normal,
    non-direct delays are uniform integers on ``[0, delay_max_samples]``.
    """

    amp: tuple = (0.75, 0.25)
    phase: tuple = (math.pi, math.pi / 2)
    alpha: tuple = (1.0, 0.0)
    delay_max_samples: int = 200
    path_count_probs: tuple = (0.4, 0.3, 0.3)
    f_delta_hz: tuple = (2000.0,)
    f_delta_probs: tuple = (1.0,)
    shared_alpha: bool = False

    def __post_init__(self):
        for name in ("amp", "phase", "alpha"):
            mu, sigma = getattr(self, name)
            if sigma < 0:
                raise InputError(f"{name} standard deviation must be non-negative")
        for name in ("path_count_probs", "f_delta_probs"):
            probs = np.asarray(getattr(self, name), dtype=float)
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
                raise InputError(f"{name} must be non-negative and sum to 1")
        if len(self.f_delta_hz) != len(self.f_delta_probs):
            raise InputError("f_delta values and probabilities differ in length")
        if self.delay_max_samples < 0:
            raise InputError("delay_max_samples must be non-negative")
        for name in ("amp", "phase", "alpha", "path_count_probs", "f_delta_hz", "f_delta_probs"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def delay_max_for(fs_hz: float, divisor: float = 100.0) -> int:
    """Upper delay bound: half a second of samples scaled down by ``divisor``."""
    return int(round(fs_hz / 2 / divisor))


# multipath without Doppler
MULTIPATH_SPEC = DistributionSpec()
# multipath plus independent per-path Doppler and a mix of phase redraw rates
OVERALL_SPEC = DistributionSpec(
    alpha=(1.0, 0.5), f_delta_hz=(1000.0, 2000.0), f_delta_probs=(0.6, 0.4)
)
# single transparent path; only noise acts
AWGN_SPEC = DistributionSpec(
    amp=(1.0, 0.0), phase=(0.0, 0.0), path_count_probs=(1.0,), delay_max_samples=0
)
# single unit-gain path with a random time scale
DOPPLER_SPEC = replace(AWGN_SPEC, alpha=(1.0, 0.5))
CHANNEL_PRESETS = {
    "awgn": AWGN_SPEC,
    "multipath": MULTIPATH_SPEC,
    "doppler": DOPPLER_SPEC,
    "overall": OVERALL_SPEC,
}


def save_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj.to_dict(), fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# operations


def doppler_shifted_fc(fc_hz, delta_rt_mps, delta_s_mps=1500.0):
    """Received carrier for a receiver closing at ``delta_rt_mps`` (negative when opening)."""
    return (1 + delta_rt_mps / delta_s_mps) * fc_hz


def noise_variance(eb: float, ebno_db: float) -> float:
    """Per-sample variance giving ``Eb/No = ebno_db`` for ``eb`` = sum of x^2 per bit."""
    return eb / (2 * 10 ** (ebno_db / 10))


def energy_per_bit(x: Waveform, bit_rate: float) -> float:
    n_bits = len(x) * bit_rate / x.sample_rate_hz
    return float(np.sum(x.samples**2) / n_bits)


def apply_awgn(x: Waveform, ebno_db, rng, *, bit_rate=1000.0, eb=None) -> Waveform:
    """Add white Gaussian noise calibrated to ``Eb/No``.

    ``eb`` is the energy per bit in discrete units (sum of squared samples over
    one bit); it is measured from ``x`` when not supplied.
    """
    if bit_rate <= 0:
        raise InputError("bit rate must be positive")
    if ebno_db >= NOISELESS_EBNO_DB:
        return x
    if eb is None:
        eb = energy_per_bit(x, bit_rate)
    sigma = math.sqrt(noise_variance(eb, ebno_db))
    return x.with_samples(x.samples + sigma * rng.standard_normal(len(x)))


def apply_doppler(x: Waveform, alpha: float) -> Waveform:
    """Time-scale ``x`` so the output is ``x(alpha * t)``."""
    if not ALPHA_RANGE[0] <= alpha <= ALPHA_RANGE[1]:
        raise InputError(f"doppler alpha {alpha} outside {ALPHA_RANGE}")
    if alpha == 1.0:
        return x
    return x.with_samples(resample(x.samples, alpha))


def redraw_period(fs_hz: float, f_delta_hz: float) -> int:
    return max(1, int(round(fs_hz / f_delta_hz)))


def draw_phase_traj(n_samples, period, phase=(math.pi, math.pi / 2), rng=None):
    n_intervals = -(-n_samples // period)
    mu, sigma = phase
    if sigma == 0:
        return np.full(n_intervals, mu % (2 * np.pi))
    return (mu + sigma * rng.standard_normal(n_intervals)) % (2 * np.pi)


def _phase_per_sample(traj, n, period):
    traj = np.asarray(traj, dtype=float)
    idx = np.minimum(np.arange(n) // period, traj.size - 1)
    return traj[idx]


def _path_output(analytic, path: PathParams, traj, n_out, period):
    a = np.zeros(n_out, dtype=complex)
    stop = min(n_out, path.delay_samples + analytic.size)
    a[path.delay_samples : stop] = analytic[: stop - path.delay_samples]
    theta = _phase_per_sample(traj, n_out, period)
    return path.amp * np.real(a * np.exp(-1j * theta))


def apply_multipath(x: Waveform, paths, f_delta_hz, rng=None) -> Waveform:
    """Sum delayed, phase-rotated, attenuated copies of ``x``.

    Phases are piecewise constant over ``round(fs / f_delta)`` samples.  A path
    with an empty ``phase_traj`` gets a fresh trajectory from ``rng``; a
    trajectory shorter than the output holds its last value.
    """
    paths = list(paths)
    if not paths:
        raise InputError("multipath needs at least one path")
    period = redraw_period(x.sample_rate_hz, f_delta_hz)
    n_out = len(x) + max(p.delay_samples for p in paths)
    analytic = hilbert(x.samples)
    out = np.zeros(n_out)
    for p in paths:
        traj = p.phase_traj if p.phase_traj else draw_phase_traj(n_out, period, rng=rng)
        out += _path_output(analytic, p, traj, n_out, period)
    return x.with_samples(out)


def apply_channel(x: Waveform, p: ChannelParams, rng=None, *, bit_rate=1000.0, eb=None) -> Waveform:
    """Full channel: per path Doppler, delay, phase and gain; then the sum plus AWGN.

    ``eb`` defaults to the energy per bit of ``x`` itself (before the channel).
    """
    period = redraw_period(x.sample_rate_hz, p.f_delta_hz)
    if eb is None:
        eb = energy_per_bit(x, bit_rate)
    outputs = []
    for path in p.paths:
        scaled = apply_doppler(x, path.doppler_alpha).samples
        n_out = scaled.size + path.delay_samples
        traj = path.phase_traj if path.phase_traj else draw_phase_traj(n_out, period, rng=rng)
        outputs.append(_path_output(hilbert(scaled), path, traj, n_out, period))
    total = np.zeros(max(o.size for o in outputs))
    for o in outputs:
        total[: o.size] += o
    return apply_awgn(x.with_samples(total), p.ebno_db, rng, bit_rate=bit_rate, eb=eb)


def _clamped_normal(rng, mu, sigma, lo, hi, size=None):
    if sigma == 0:
        v = np.full(size if size is not None else (), float(mu))
    else:
        v = mu + sigma * rng.standard_normal(size)
    return np.clip(v, lo, hi)


# smallest amplitude a clamped draw may take; amplitudes live in (0, 1]
AMP_FLOOR = 1e-3


def sample_channel_params(spec: DistributionSpec, rng, *, n_samples=0, fs_hz=40000.0, ebno_db=math.inf) -> ChannelParams:
    """Draw one channel realization.

    ``n_samples`` sizes the phase trajectories (they hold their last value past
    it).  Draw order is fixed so a seed always yields the same channel.
    """
    counts = np.arange(1, len(spec.path_count_probs) + 1)
    n_paths = int(rng.choice(counts, p=spec.path_count_probs))
    f_delta = float(rng.choice(spec.f_delta_hz, p=spec.f_delta_probs))
    period = redraw_period(fs_hz, f_delta)
    amps = _clamped_normal(rng, *spec.amp, AMP_FLOOR, 1.0, size=n_paths)
    if spec.shared_alpha:
        alphas = np.full(n_paths, _clamped_normal(rng, *spec.alpha, *ALPHA_RANGE))
    else:
        alphas = _clamped_normal(rng, *spec.alpha, *ALPHA_RANGE, size=n_paths)
    delays = np.zeros(n_paths, dtype=np.int64)
    if n_paths > 1:
        delays[1:] = np.sort(rng.integers(0, spec.delay_max_samples + 1, n_paths - 1))
    # trajectories must cover the longest (slowest, most delayed) path
    n_cover = int(math.ceil(max(n_samples, 1) / ALPHA_RANGE[0])) + int(delays.max())
    paths = tuple(
        PathParams(
            amp=float(amps[i]),
            phase_traj=tuple(draw_phase_traj(n_cover, period, spec.phase, rng)),
            delay_samples=int(delays[i]),
            doppler_alpha=float(alphas[i]),
        )
        for i in range(n_paths)
    )
    return ChannelParams(paths, float(ebno_db), f_delta)


def with_ebno(p: ChannelParams, ebno_db: float) -> ChannelParams:
    return replace(p, ebno_db=float(ebno_db))
