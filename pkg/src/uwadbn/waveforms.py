"""Transmit side: PSK modulation, HFM pilots and frame assembly.

All waveforms are real passband signals sampled at ``fs``.  Time is global
(``t = n / fs`` from the first payload sample), so symbol slots need not
contain an integer number of carrier cycles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError

BPSK = "BPSK"
QPSK = "QPSK"
BITS_PER_SYMBOL = {BPSK: 1, QPSK: 2}

# Gray-coded QPSK: label = 2*b0 + b1 -> carrier phase.
QPSK_PHASES = np.array([1, 3, 7, 5]) * np.pi / 4  # 00, 01, 10, 11
BPSK_PHASES = np.array([np.pi, 0.0])  # bit 0, bit 1


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        s = np.array(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise InputError("waveform must be a non-empty 1-D sequence")
        if not self.sample_rate_hz > 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate_hz}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate_hz)


@dataclass(frozen=True)
class ModSpec:
    scheme: str = BPSK
    fc_hz: float = 2000.0
    fs_hz: float = 40000.0
    rb_bits_per_s: float = 1000.0

    def __post_init__(self):
        if self.scheme not in BITS_PER_SYMBOL:
            raise ConfigurationError(f"unknown modulation scheme {self.scheme!r}")
        if self.fc_hz <= 0 or self.rb_bits_per_s <= 0:
            raise ConfigurationError("carrier frequency and bit rate must be positive")
        if self.fs_hz < 4 * self.fc_hz:
            raise ConfigurationError(
                f"fs={self.fs_hz} Hz is below 4*fc={4 * self.fc_hz} Hz"
            )
        ratio = self.fs_hz / self.rb_bits_per_s
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigurationError(
                f"fs/rb = {ratio} is not a positive integer number of samples per bit"
            )

    @property
    def bits_per_symbol(self) -> int:
        return BITS_PER_SYMBOL[self.scheme]

    @property
    def samples_per_bit(self) -> int:
        return int(round(self.fs_hz / self.rb_bits_per_s))

    @property
    def samples_per_symbol(self) -> int:
        return self.samples_per_bit * self.bits_per_symbol

    @property
    def n_labels(self) -> int:
        return 2**self.bits_per_symbol

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "fc_hz": self.fc_hz,
            "fs_hz": self.fs_hz,
            "rb_bits_per_s": self.rb_bits_per_s,
        }


def as_bits(bits) -> np.ndarray:
    """Validate and return ``bits`` as a uint8 array of 0/1 values."""
    b = np.asarray(bits)
    if b.ndim != 1:
        raise InputError("bit sequence must be 1-D")
    if b.size and not np.all((b == 0) | (b == 1)):
        raise InputError("bit sequence may only contain 0 and 1")
    return b.astype(np.uint8)


def bits_to_labels(bits, bits_per_symbol: int) -> np.ndarray:
    b = as_bits(bits)
    if b.size % bits_per_symbol:
        raise InputError(
            f"{b.size} bits is not a multiple of {bits_per_symbol} bits per symbol"
        )
    groups = b.reshape(-1, bits_per_symbol).astype(np.int64)
    weights = 1 << np.arange(bits_per_symbol - 1, -1, -1)
    return groups @ weights


def labels_to_bits(labels, bits_per_symbol: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    shifts = np.arange(bits_per_symbol - 1, -1, -1)
    return ((labels[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def symbol_phases(spec: ModSpec) -> np.ndarray:
    return BPSK_PHASES if spec.scheme == BPSK else QPSK_PHASES


def modulate(bits, spec: ModSpec) -> Waveform:
    """Map bits onto carrier phases, one constant-phase slot per symbol."""
    b = as_bits(bits)
    if b.size == 0:
        raise InputError("cannot modulate an empty bit sequence")
    if spec.scheme == QPSK and b.size % 2:
        raise InputError("QPSK needs an even number of bits")
    labels = bits_to_labels(b, spec.bits_per_symbol)
    n = labels.size * spec.samples_per_symbol
    wt = 2 * np.pi * spec.fc_hz * np.arange(n) / spec.fs_hz
    if spec.scheme == BPSK:
        # +/-cos keeps the two symbols exact negatives of each other
        sign = np.repeat(2.0 * labels - 1.0, spec.samples_per_symbol)
        return Waveform(sign * np.cos(wt), spec.fs_hz)
    phase = np.repeat(symbol_phases(spec)[labels], spec.samples_per_symbol)
    return Waveform(np.cos(wt + phase), spec.fs_hz)


def make_hfm(f0_hz, f1_hz, duration_s, fs_hz, direction="up") -> Waveform:
    """Unit-amplitude hyperbolic FM sweep between ``f0_hz`` and ``f1_hz``.

    The period (1/f) of the instantaneous frequency changes linearly in time,
    which is what makes the sweep tolerant to Doppler time-scaling.
    """
    if not 0 < f0_hz < f1_hz:
        raise InputError(f"need 0 < f0 < f1, got f0={f0_hz}, f1={f1_hz}")
    if duration_s <= 0:
        raise InputError("sweep duration must be positive")
    if direction == "up":
        fa, fb = f0_hz, f1_hz
    elif direction == "down":
        fa, fb = f1_hz, f0_hz
    else:
        raise InputError(f"direction must be 'up' or 'down', got {direction!r}")
    n = int(round(duration_s * fs_hz))
    t = np.arange(n) / fs_hz
    k = (fa - fb) / (fa * fb * duration_s)
    phase = 2 * np.pi / k * np.log1p(k * fa * t)
    return Waveform(np.cos(phase), fs_hz)


def hfm_instantaneous_frequency(f0_hz, f1_hz, duration_s, t, direction="up"):
    fa, fb = (f0_hz, f1_hz) if direction == "up" else (f1_hz, f0_hz)
    k = (fa - fb) / (fa * fb * duration_s)
    return fa / (1 + k * fa * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class FrameLayout:
    pilot_up: Waveform
    pilot_down: Waveform
    guard_samples: int
    payload_bits: int = 416
    # sweep band and duration, needed to undo the HFM range-Doppler coupling
    hfm_band_hz: tuple = field(default=(1000.0, 4000.0))

    def __post_init__(self):
        if self.guard_samples < 0:
            raise InputError("guard length must be non-negative")
        if self.payload_bits <= 0:
            raise InputError("payload must hold at least one bit")
        if self.pilot_up.sample_rate_hz != self.pilot_down.sample_rate_hz:
            raise InputError("up and down pilots must share a sample rate")

    @property
    def sample_rate_hz(self) -> float:
        return self.pilot_up.sample_rate_hz

    @property
    def pilot_spacing(self) -> int:
        """Nominal samples between the starts of the up and down sweeps."""
        return len(self.pilot_up) + self.guard_samples

    @property
    def payload_offset(self) -> int:
        return len(self.pilot_up) + len(self.pilot_down) + 2 * self.guard_samples

    def check_payload(self, spec: ModSpec):
        if self.payload_bits % spec.bits_per_symbol:
            raise InputError(
                f"payload of {self.payload_bits} bits does not fill whole {spec.scheme} symbols"
            )


def default_layout(
    spec: ModSpec | None = None,
    *,
    payload_bits=416,
    hfm_band_hz=(1000.0, 4000.0),
    sweep_s=1 / 50,
    guard_s=0.05,
) -> FrameLayout:
    """Frame layout with one 20 ms up-sweep and one 20 ms down-sweep.

    The 50 ms default guard keeps the up/down Doppler estimate well
    conditioned; with much shorter guards the HFM range-Doppler shifts of the
    two sweeps nearly cancel the time-scale information.
    """
    spec = spec or ModSpec()
    f0, f1 = hfm_band_hz
    up = make_hfm(f0, f1, sweep_s, spec.fs_hz, "up")
    down = make_hfm(f0, f1, sweep_s, spec.fs_hz, "down")
    layout = FrameLayout(
        up, down, int(round(guard_s * spec.fs_hz)), payload_bits, (float(f0), float(f1))
    )
    layout.check_payload(spec)
    return layout


def build_frame(layout: FrameLayout, payload: Waveform) -> Waveform:
    """Concatenate ``[up | guard | down | guard | payload]``."""
    fs = layout.sample_rate_hz
    if payload.sample_rate_hz != fs:
        raise InputError(
            f"payload sample rate {payload.sample_rate_hz} != pilot sample rate {fs}"
        )
    guard = np.zeros(layout.guard_samples)
    parts = [layout.pilot_up.samples, guard, layout.pilot_down.samples, guard, payload.samples]
    return Waveform(np.concatenate(parts), fs)


def save_waveform(w: Waveform, path) -> Path:
    """Write little-endian float32 samples plus a ``<path>.json`` descriptor."""
    path = Path(path)
    w.samples.astype("<f4").tofile(path)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(
        json.dumps({"sample_rate_hz": w.sample_rate_hz, "length": len(w)}, sort_keys=True)
    )
    return path


def load_waveform(path, sample_rate_hz: float | None = None) -> Waveform:
    path = Path(path)
    samples = np.fromfile(path, dtype="<f4").astype(np.float64)
    sidecar = path.with_name(path.name + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if meta["length"] != samples.size:
            raise InputError(
                f"{path}: descriptor says {meta['length']} samples, file has {samples.size}"
            )
        sample_rate_hz = meta["sample_rate_hz"]
    if sample_rate_hz is None:
        raise InputError(f"{path}: no sidecar descriptor and no sample rate given")
    return Waveform(samples, sample_rate_hz)
