"""Receive chain: pilot detection, Doppler estimation/compensation, demodulation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import fftconvolve, hilbert

from .channel import ALPHA_RANGE, resample
from .errors import ConfigurationError, DetectionError, EstimationError, InputError
from .pixelizer import normalize_rows
from .waveforms import FrameLayout, ModSpec, Waveform, default_layout, labels_to_bits, symbol_phases

METHODS = ("mle", "mle+doppler-sync", "dbn-denoise+mle", "dbn")
SNR_CAP_DB = 300.0
_TOP_CANDIDATES = 64
# pair-mean correlation; pure noise over a frame-length record peaks near 0.17
DEFAULT_THRESHOLD = 0.18
# records whose spectral flatness falls below this are signal-dominated and get
# whitened before the pilot search, so a strong narrowband payload cannot pose
# as a pilot; full frames at 0 dB sit around 0.985-0.99 and stay unwhitened
FLATNESS_GATE = 0.985
_SMOOTH_HZ = 100.0
_REFINE_RADIUS = 20


@dataclass(frozen=True)
class PilotDetection:
    up_peak_index: int
    down_peak_index: int
    up_corr: float
    down_corr: float
    payload_offset: int
    # sub-sample peak positions (parabolic interpolation), used by the Doppler estimate
    up_peak_pos: float = math.nan
    down_peak_pos: float = math.nan

    def __post_init__(self):
        for name in ("up_peak_index", "down_peak_index", "payload_offset"):
            object.__setattr__(self, name, int(getattr(self, name)))
        for name in ("up_corr", "down_corr", "up_peak_pos", "down_peak_pos"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.down_peak_index <= self.up_peak_index:
            raise InputError("down-sweep peak must follow the up-sweep peak")
        if math.isnan(self.up_peak_pos):
            object.__setattr__(self, "up_peak_pos", float(self.up_peak_index))
        if math.isnan(self.down_peak_pos):
            object.__setattr__(self, "down_peak_pos", float(self.down_peak_index))


def _sweep_coupling(layout: FrameLayout):
    """Per-unit-``u`` peak shifts of the up and down sweeps, in samples.

    A time-scaled HFM correlates best against its template at a lag that moves
    with the scale factor.  With ``u = 1/alpha - 1`` the up-sweep peak sits
    ``u * Cu`` samples after the true sweep start and the down-sweep peak
    ``u * Cd`` samples before it.
    """
    f0, f1 = layout.hfm_band_hz
    T = len(layout.pilot_up) / layout.sample_rate_hz
    fs = layout.sample_rate_hz
    return fs * f1 * T / (f1 - f0), fs * f0 * T / (f1 - f0)


def _normalized_corr(analytic, cum_energy, template):
    """|<r, tpl>| / (|tpl| * |r window|) at every window start."""
    L = template.size
    ta = hilbert(template)
    c = fftconvolve(analytic, ta[::-1].conj(), mode="valid")
    e = cum_energy[L:] - cum_energy[:-L]
    e = np.maximum(e, 0.5 * np.median(e))
    return np.abs(c) / (np.linalg.norm(ta) * np.sqrt(e))


def _refine(c, p):
    if 0 < p < c.size - 1:
        y0, y1, y2 = c[p - 1], c[p], c[p + 1]
        den = y0 - 2 * y1 + y2
        if den < 0:
            return p + 0.5 * (y0 - y2) / den
    return float(p)


def _smoothed_power(x: np.ndarray, fs: float):
    X = np.fft.rfft(x)
    k = max(1, int(round(_SMOOTH_HZ * x.size / fs)))
    return X, uniform_filter1d(np.abs(X) ** 2, 2 * k + 1, mode="nearest")


def spectral_flatness(x: np.ndarray, fs: float) -> float:
    """Geometric over arithmetic mean of the smoothed power spectrum (1 = white)."""
    _, p = _smoothed_power(np.asarray(x, dtype=np.float64), fs)
    p = p + 1e-300
    return float(np.exp(np.mean(np.log(p))) / np.mean(p))


def whiten(x: np.ndarray, fs: float) -> np.ndarray:
    """Zero-phase spectral whitening; peak positions are preserved."""
    X, p = _smoothed_power(x, fs)
    mag = np.sqrt(np.maximum(p, 1e-12 * p.max()))
    return np.fft.irfft(X / mag, x.size)


def _correlations(x: np.ndarray, layout: FrameLayout):
    L = len(layout.pilot_up)
    padded = np.concatenate([np.zeros(L), x, np.zeros(L)])
    analytic = hilbert(padded)
    cum = np.concatenate([[0.0], np.cumsum(np.abs(analytic) ** 2)])
    if cum[-1] <= 0:
        raise DetectionError("signal is identically zero")
    return (
        _normalized_corr(analytic, cum, layout.pilot_up.samples),
        _normalized_corr(analytic, cum, layout.pilot_down.samples),
    )


def _local_peak(c, p):
    lo, hi = max(0, p - _REFINE_RADIUS), min(c.size, p + _REFINE_RADIUS + 1)
    return lo + int(np.argmax(c[lo:hi]))


def detect_pilot(s: Waveform, layout: FrameLayout, threshold: float = DEFAULT_THRESHOLD) -> PilotDetection:
    """Locate the up/down HFM pair by joint normalized correlation.

    The best pair maximizes the summed correlation of an up-sweep peak and a
    down-sweep peak whose spacing is consistent with any admissible Doppler
    factor.  The mean of the two peak correlations must clear ``threshold``.
    Signal-dominated records are searched after whitening, and the peaks are
    then re-located on the raw record.
    """
    if not 0 < threshold < 1:
        raise ConfigurationError("detection threshold must lie in (0, 1)")
    x = np.asarray(getattr(s, "samples", s), dtype=np.float64)
    L = len(layout.pilot_up)
    if x.size < layout.payload_offset:
        raise InputError("signal is shorter than the frame preamble")
    if not np.any(x):
        raise DetectionError("signal is identically zero")
    fs = layout.sample_rate_hz
    whitened = spectral_flatness(x, fs) < FLATNESS_GATE
    cu, cd = _correlations(whiten(x, fs) if whitened else x, layout)
    # admissible up/down peak spacings under the coupled model, spacing = D + u * span
    D = layout.pilot_spacing
    cpl_u, cpl_d = _sweep_coupling(layout)
    gaps = [D + (1.0 / a - 1.0) * (D - cpl_u - cpl_d) for a in ALPHA_RANGE]
    lo_gap = max(1, int(math.floor(min(gaps))) - 2)
    hi_gap = int(math.ceil(max(gaps))) + 2
    best = (-1.0, 0, 0)
    for pu in np.argsort(cu)[::-1][:_TOP_CANDIDATES]:
        lo, hi = pu + lo_gap, min(pu + hi_gap + 1, cd.size)
        if lo >= hi:
            continue
        pd = lo + int(np.argmax(cd[lo:hi]))
        score = cu[pu] + cd[pd]
        if score > best[0]:
            best = (score, int(pu), pd)
    _, pu, pd = best
    if best[0] < 2 * threshold:
        raise DetectionError(
            f"no pilot pair above threshold {threshold} (best up {cu[pu]:.3f}, down {cd[pd]:.3f})"
        )
    if whitened:
        cu, cd = _correlations(x, layout)
        pu, pd = _local_peak(cu, pu), _local_peak(cd, pd)
    up_pos, down_pos = _refine(cu, pu) - L, _refine(cd, pd) - L
    provisional = PilotDetection(pu - L, pd - L, float(cu[pu]), float(cd[pd]), 0, up_pos, down_pos)
    alpha = _alpha_from_positions(provisional, layout)
    start = frame_start(provisional, layout, alpha)
    offset = int(round(start + layout.payload_offset / alpha))
    return PilotDetection(pu - L, pd - L, float(cu[pu]), float(cd[pd]), offset, up_pos, down_pos)


def _alpha_from_positions(d: PilotDetection, layout: FrameLayout) -> float:
    spacing = d.down_peak_pos - d.up_peak_pos
    if spacing <= 0:
        raise EstimationError(f"non-positive pilot spacing {spacing}")
    D = layout.pilot_spacing
    cu, cd = _sweep_coupling(layout)
    u = (spacing - D) / (D - cu - cd)
    if u <= -1:
        raise EstimationError("pilot spacing implies a non-physical Doppler factor")
    return 1.0 / (1.0 + u)


def estimate_doppler(d: PilotDetection, layout: FrameLayout) -> float:
    """Doppler factor from the measured up/down peak spacing.

    The raw spacing ratio is biased by the HFM delay-Doppler coupling, so the
    estimate inverts the coupled spacing model instead of taking the ratio.
    """
    return _alpha_from_positions(d, layout)


def frame_start(d: PilotDetection, layout: FrameLayout, alpha: float) -> float:
    """Received-sample index where the up-sweep begins."""
    cu, _ = _sweep_coupling(layout)
    return d.up_peak_pos - (1.0 / alpha - 1.0) * cu


def compensate_doppler(s: Waveform, alpha_hat: float) -> Waveform:
    """Undo a time scaling by ``alpha_hat``; output length ``round(len * alpha_hat)``."""
    if not ALPHA_RANGE[0] <= alpha_hat <= ALPHA_RANGE[1]:
        raise InputError(f"alpha estimate {alpha_hat} outside {ALPHA_RANGE}")
    if alpha_hat == 1.0:
        return s
    return s.with_samples(resample(s.samples, 1.0 / alpha_hat))


# ---------------------------------------------------------------------------
# demodulation


def _carrier_projections(x: np.ndarray, spec: ModSpec):
    n = spec.samples_per_symbol
    if x.size % n:
        raise InputError(f"{x.size} samples is not a whole number of {n}-sample symbols")
    t = np.arange(x.size) / spec.fs_hz
    w = 2 * np.pi * spec.fc_hz * t
    seg = x.reshape(-1, n)
    return (seg * np.cos(w).reshape(-1, n)).sum(axis=1), (seg * np.sin(w).reshape(-1, n)).sum(axis=1)


def mle_labels(s, spec: ModSpec) -> np.ndarray:
    """Per-symbol argmax correlation against every candidate symbol waveform.

    Time is measured from the first sample of ``s``.  Ties go to the lowest
    label (bit 0 for BPSK).
    """
    x = np.asarray(getattr(s, "samples", s), dtype=np.float64)
    i, q = _carrier_projections(x, spec)
    phases = symbol_phases(spec)
    # sum_t x cos(w t + phi) = I cos(phi) - Q sin(phi)
    scores = i[:, None] * np.cos(phases) - q[:, None] * np.sin(phases)
    return np.argmax(scores, axis=1)


def mle_demodulate(s, spec: ModSpec) -> np.ndarray:
    return labels_to_bits(mle_labels(s, spec), spec.bits_per_symbol)


def symbol_segments(x: np.ndarray, n_symbols: int, sps: int) -> np.ndarray:
    """``n_symbols x sps`` matrix from the head of ``x``, zero-padded if short."""
    need = n_symbols * sps
    out = np.zeros(need)
    take = min(need, x.size)
    out[:take] = x[:take]
    return out.reshape(n_symbols, sps)


def normalize_segments(segs: np.ndarray, scope: str = "symbol") -> np.ndarray:
    if scope == "symbol":
        return normalize_rows(segs)
    if scope == "frame":
        return normalize_rows(segs.reshape(1, -1)).reshape(segs.shape)
    raise ConfigurationError(f"unknown normalization scope {scope!r}")


# ---------------------------------------------------------------------------
# end-to-end


@dataclass(frozen=True)
class RxConfig:
    spec: ModSpec = field(default_factory=ModSpec)
    layout: FrameLayout | None = None
    method: str = "dbn"
    threshold: float = DEFAULT_THRESHOLD
    denoise_model_path: str | None = None
    classifier_model_path: str | None = None
    doppler_compensation: bool = False
    normalization: str = "symbol"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not 0 < self.threshold < 1:
            raise ConfigurationError("detection threshold must lie in (0, 1)")
        if self.layout is None:
            object.__setattr__(self, "layout", default_layout(self.spec))
        self.layout.check_payload(self.spec)

    @classmethod
    def from_dict(cls, d: dict) -> "RxConfig":
        d = dict(d)
        spec = ModSpec(**d.pop("spec", {}))
        layout_args = d.pop("layout", {})
        return cls(spec=spec, layout=default_layout(spec, **layout_args), **d)


@dataclass(frozen=True)
class RxReport:
    bits: np.ndarray
    alpha_hat: float
    snr_est_db: float
    posteriors: np.ndarray
    detection: PilotDetection | None
    timing: dict

    def to_dict(self) -> dict:
        bits = np.asarray(self.bits, dtype=np.uint8)
        return {
            "n_bits": int(bits.size),
            "bits_hex": np.packbits(bits).tobytes().hex(),
            "alpha_hat": self.alpha_hat,
            "snr_est_db": self.snr_est_db,
            "posteriors": np.asarray(self.posteriors).tolist(),
            "detection": None if self.detection is None else self.detection.__dict__,
            "timing": self.timing,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def estimate_snr_db(x: np.ndarray, payload_start: int, noise_len: int, n_payload: int) -> float:
    """Payload-to-noise power ratio; noise is the ``noise_len`` samples before the payload."""
    noise = x[max(0, payload_start - noise_len) : max(0, payload_start)]
    payload = x[max(0, payload_start) : max(0, payload_start) + n_payload]
    if noise.size == 0 or payload.size == 0:
        return math.nan
    pn, pp = float(np.mean(noise**2)), float(np.mean(payload**2))
    if pn <= 0:
        return SNR_CAP_DB
    if pp <= pn:
        return -SNR_CAP_DB
    return float(np.clip(10 * math.log10((pp - pn) / pn), -SNR_CAP_DB, SNR_CAP_DB))


def _one_hot(labels, n):
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass(frozen=True)
class Sync:
    """Where the frame starts in the received record and its time-scale factor."""

    start: float
    alpha: float

    @classmethod
    def from_detection(cls, d: PilotDetection, layout: FrameLayout) -> "Sync":
        alpha = estimate_doppler(d, layout)
        return cls(frame_start(d, layout, alpha), alpha)

    def payload_start(self, layout: FrameLayout) -> int:
        return int(round(self.start + layout.payload_offset / self.alpha))


def uses_compensation(cfg: "RxConfig") -> bool:
    return cfg.method == "mle+doppler-sync" or (cfg.method.startswith("dbn") and cfg.doppler_compensation)


def payload_symbols(s: Waveform, cfg: "RxConfig", sync: Sync) -> np.ndarray:
    """Slice the payload into ``n_symbols x samples_per_symbol`` rows.

    With compensation the record is first resampled by ``1/alpha``; otherwise
    symbols are cut at the nominal length starting from the scaled offset.
    """
    n_sym = cfg.layout.payload_bits // cfg.spec.bits_per_symbol
    sps = cfg.spec.samples_per_symbol
    if uses_compensation(cfg):
        a = float(np.clip(sync.alpha, *ALPHA_RANGE))
        y = compensate_doppler(s, a).samples
        offset = int(round(sync.start * a)) + cfg.layout.payload_offset
    else:
        y, offset = np.asarray(s.samples), sync.payload_start(cfg.layout)
    if offset < 0:
        y = np.concatenate([np.zeros(-offset), y])
        offset = 0
    return symbol_segments(y[offset:], n_sym, sps)


def receive(s: Waveform, cfg: RxConfig, denoiser=None, classifier=None, *, detection=None, sync=None) -> RxReport:
    """Run the configured receive method over one frame.

    Synchronization comes from ``sync`` when given (e.g. ground truth in
    simulations), else from ``detection``, else from pilot detection on ``s``.
    DBN models are taken from the arguments when given, otherwise loaded from
    the paths in ``cfg``.
    """
    from . import dbn  # local import keeps the MLE path free of model code

    t0 = time.perf_counter()
    d = None
    if sync is None:
        d = detection or detect_pilot(s, cfg.layout, cfg.threshold)
        sync = Sync.from_detection(d, cfg.layout)
    segs = payload_symbols(s, cfg, sync)
    spec = cfg.spec
    n_labels = spec.n_labels
    method = cfg.method
    if method.startswith("dbn"):
        if denoiser is None:
            if not cfg.denoise_model_path:
                raise ConfigurationError(f"method {method!r} needs a de-noising model")
            denoiser = dbn.load_model(cfg.denoise_model_path)
        if denoiser.frame_len != spec.samples_per_symbol:
            raise ConfigurationError("de-noising model frame length does not match the symbol length")
        z = dbn.denoise_segments(denoiser, normalize_segments(segs, cfg.normalization))
        if method == "dbn":
            if classifier is None:
                if not cfg.classifier_model_path:
                    raise ConfigurationError("method 'dbn' needs a classifier model")
                classifier = dbn.load_model(cfg.classifier_model_path)
            if classifier.base.n_input != spec.samples_per_symbol or classifier.n_labels != n_labels:
                raise ConfigurationError("classifier dimensions do not match the modulation")
            labels, post = dbn.classify(classifier, z)
        else:
            labels = mle_labels(z.ravel(), spec)
            post = _one_hot(labels, n_labels)
    else:
        labels = mle_labels(segs.ravel(), spec)
        post = _one_hot(labels, n_labels)
    bits = labels_to_bits(labels, spec.bits_per_symbol)
    start = sync.payload_start(cfg.layout)
    noise_len = int(cfg.layout.guard_samples / (2 * sync.alpha))
    snr = estimate_snr_db(np.asarray(s.samples), start, noise_len, int(segs.size / sync.alpha))
    timing = {"wall_ms": (time.perf_counter() - t0) * 1e3}
    return RxReport(bits, float(sync.alpha), snr, post, d, timing)
