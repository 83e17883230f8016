"""Signal-to-image pre-processing.

A normalized segment becomes a ``Pix x F_l`` binary matrix whose cells are
all 1 except one 0 per column marking the quantized sample value (row 1 is
the top, i.e. value 1.0).  Several decimated copies at different vertical
resolutions are stacked to form the DBN visible vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InputError

# (Pix, decimation) pairs; on a 40-sample symbol these flatten to 875 cells.
DEFAULT_RESOLUTIONS = ((15, 1), (10, 2), (5, 4), (5, 8))


@dataclass(frozen=True)
class PixelFrame:
    cells: np.ndarray  # (rows, cols), uint8 for hard frames, float for soft ones

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    def trace_rows(self) -> np.ndarray:
        """0-based row index of the minimum of each column (topmost on ties)."""
        return np.argmin(self.cells, axis=0)


@dataclass(frozen=True)
class FrameSet:
    frames: tuple

    def __post_init__(self):
        if not self.frames:
            raise InputError("a frame set needs at least one frame")
        object.__setattr__(self, "frames", tuple(self.frames))

    def flatten(self) -> np.ndarray:
        return np.concatenate([f.cells.ravel() for f in self.frames])


def normalize(s) -> np.ndarray:
    """Min-max scale to [0, 1]."""
    x = np.asarray(getattr(s, "samples", s), dtype=np.float64)
    if x.size == 0:
        raise InputError("cannot normalize an empty signal")
    lo, hi = x.min(), x.max()
    if hi == lo:
        raise DegenerateInputError("constant signal has no min-max normalization")
    return (x - lo) / (hi - lo)


def normalize_rows(segments: np.ndarray, fill: float = 0.5) -> np.ndarray:
    """Row-wise min-max normalization; constant rows become ``fill``.

    Used on received data where an all-zero (e.g. padded) segment is a fact of
    life rather than a caller mistake.
    """
    x = np.asarray(segments, dtype=np.float64)
    lo = x.min(axis=1, keepdims=True)
    span = x.max(axis=1, keepdims=True) - lo
    out = np.full_like(x, fill)
    ok = span[:, 0] > 0
    out[ok] = (x[ok] - lo[ok]) / span[ok]
    return out


def _trace_rows(s_norm: np.ndarray, pix: int) -> np.ndarray:
    return np.floor((1.0 - s_norm) * (pix - 1) + 0.5).astype(np.int64)


def _check_unit(s_norm):
    if np.any(s_norm < 0) or np.any(s_norm > 1) or not np.all(np.isfinite(s_norm)):
        raise InputError("pixelize expects values in [0, 1]")


def pixelize(s_norm, pix: int) -> PixelFrame:
    s = np.asarray(s_norm, dtype=np.float64)
    if pix < 2:
        raise InputError("need at least two pixel rows")
    _check_unit(s)
    cells = np.ones((pix, s.size), dtype=np.uint8)
    cells[_trace_rows(s, pix), np.arange(s.size)] = 0
    return PixelFrame(cells)


def depixelize(frame) -> np.ndarray:
    cells = frame.cells if isinstance(frame, PixelFrame) else np.asarray(frame)
    rows = np.argmin(cells, axis=0)
    return 1.0 - rows / (cells.shape[0] - 1)


def decimate(s, factor: int) -> np.ndarray:
    """Block means over ``factor`` samples; a trailing partial block is averaged too."""
    s = np.asarray(s, dtype=np.float64)
    if factor < 1 or factor > s.size:
        raise InputError(f"decimation factor {factor} invalid for {s.size} samples")
    n_full = s.size // factor
    out = s[: n_full * factor].reshape(n_full, factor).mean(axis=1)
    if s.size % factor:
        out = np.append(out, s[n_full * factor :].mean())
    return out


def multi_resolution(s_norm, resolutions=DEFAULT_RESOLUTIONS) -> FrameSet:
    if not resolutions:
        raise InputError("need at least one resolution")
    return FrameSet(tuple(pixelize(decimate(s_norm, d), p) for p, d in resolutions))


def feature_dim(frame_len: int, resolutions=DEFAULT_RESOLUTIONS) -> int:
    return sum(p * -(-frame_len // d) for p, d in resolutions)


def batch_features(s_norm: np.ndarray, resolutions=DEFAULT_RESOLUTIONS) -> np.ndarray:
    """Flattened ``multi_resolution`` for every row of ``s_norm`` at once.

    Returns a float64 ``(n, feature_dim)`` matrix, identical row-for-row to
    ``multi_resolution(row).flatten()``.
    """
    s = np.atleast_2d(np.asarray(s_norm, dtype=np.float64))
    _check_unit(s)
    n, length = s.shape
    blocks = []
    for pix, d in resolutions:
        if d > length:
            raise InputError(f"decimation factor {d} invalid for {length} samples")
        n_full = length // d
        dec = s[:, : n_full * d].reshape(n, n_full, d).mean(axis=2)
        if length % d:
            dec = np.concatenate([dec, s[:, n_full * d :].mean(axis=1, keepdims=True)], axis=1)
        cells = np.ones((n, pix, dec.shape[1]))
        rows = _trace_rows(dec, pix)
        np.put_along_axis(cells, rows[:, None, :], 0.0, axis=1)
        blocks.append(cells.reshape(n, -1))
    return np.concatenate(blocks, axis=1)


def batch_depixelize(cells: np.ndarray, pix: int, frame_len: int) -> np.ndarray:
    """Depixelize the leading ``pix x frame_len`` block of each row of ``cells``."""
    c = np.asarray(cells)[:, : pix * frame_len].reshape(-1, pix, frame_len)
    return 1.0 - np.argmin(c, axis=1) / (pix - 1)


@dataclass(frozen=True)
class Segment:
    samples: np.ndarray
    n_valid: int

    @property
    def padded(self) -> bool:
        return self.n_valid < self.samples.size


def segment(s, frame_len: int) -> list:
    """Split into consecutive windows; the last partial window is zero-padded."""
    if frame_len < 1:
        raise InputError("frame length must be at least 1")
    x = np.asarray(getattr(s, "samples", s), dtype=np.float64)
    out = []
    for start in range(0, x.size, frame_len):
        chunk = x[start : start + frame_len]
        n_valid = chunk.size
        if n_valid < frame_len:
            chunk = np.concatenate([chunk, np.zeros(frame_len - n_valid)])
        out.append(Segment(chunk, n_valid))
    return out


# ---------------------------------------------------------------------------
# binary serialization: u32 rows, u32 cols (little-endian) then row-major packed bits

_HEADER = struct.Struct("<II")


def frame_to_bytes(frame: PixelFrame) -> bytes:
    cells = np.asarray(frame.cells)
    if not np.all((cells == 0) | (cells == 1)):
        raise InputError("only hard (0/1) frames can be bit-packed")
    bits = np.packbits(cells.astype(np.uint8).ravel())
    return _HEADER.pack(*cells.shape) + bits.tobytes()


def frame_from_bytes(buf: bytes) -> PixelFrame:
    rows, cols = _HEADER.unpack_from(buf)
    n_bytes = -(-rows * cols // 8)
    bits = np.unpackbits(np.frombuffer(buf, np.uint8, n_bytes, _HEADER.size))
    return PixelFrame(bits[: rows * cols].reshape(rows, cols))


def frameset_to_bytes(fs: FrameSet) -> bytes:
    parts = [struct.pack("<I", len(fs.frames))]
    for f in fs.frames:
        blob = frame_to_bytes(f)
        parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


def frameset_from_bytes(buf: bytes) -> FrameSet:
    (count,) = struct.unpack_from("<I", buf)
    pos, frames = 4, []
    for _ in range(count):
        (size,) = struct.unpack_from("<I", buf, pos)
        frames.append(frame_from_bytes(buf[pos + 4 : pos + 4 + size]))
        pos += 4 + size
    return FrameSet(tuple(frames))
