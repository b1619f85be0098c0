"""Anchor location codec: grid quantization, Morton ordering, delta coding.

Locations are snapped to an integer grid anchored at the bounding-box
minimum, sorted along the Morton curve, and each axis is delta coded against
the previous point. Zigzagged deltas are split into a bit-length class, coded
with an adaptive frequency model per axis, and the remaining mantissa bits,
coded at uniform probability.
"""

from __future__ import annotations

import numpy as np

from .coder import RangeDecoder, RangeEncoder

GRID_BITS = 21
N_CLASSES = GRID_BITS + 2  # bit lengths 0..22 of zigzagged deltas
STEP_FRACTION = 1e-3
_INC = 24
_LIMIT = 1 << 16


def default_step(points) -> float:
    """1e-3 of the bounding-box diagonal (1e-3 for degenerate boxes)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return STEP_FRACTION
    diag = float(np.linalg.norm(points.max(0) - points.min(0)))
    return float(np.float32(STEP_FRACTION * diag)) if diag > 0 else STEP_FRACTION


def default_origin(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(3)
    # round down into f32 so every point stays on the non-negative side
    lo = points.min(0).astype(np.float32)
    lo = np.where(lo.astype(np.float64) > points.min(0), np.nextafter(lo, np.float32(-np.inf)), lo)
    return lo.astype(np.float64)


def quantize_grid(points, origin, step) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = np.rint((points - np.asarray(origin, dtype=np.float64)) / step)
    if np.any(~np.isfinite(q)) or np.any(q < 0) or np.any(q >= 1 << GRID_BITS):
        raise ValueError("grid overflow")
    return q.astype(np.int64)


def dequantize_grid(q, origin, step) -> np.ndarray:
    return np.asarray(origin, dtype=np.float64) + np.asarray(q, dtype=np.float64) * step


def morton_codes(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.uint64).reshape(-1, 3)
    code = np.zeros(len(q), dtype=np.uint64)
    for bit in range(GRID_BITS):
        for axis in range(3):
            code |= ((q[:, axis] >> np.uint64(bit)) & np.uint64(1)) << np.uint64(3 * bit + axis)
    return code


def morton_order(q) -> np.ndarray:
    return np.argsort(morton_codes(q), kind="stable")


def _zigzag(d):
    return np.where(d >= 0, 2 * d, -2 * d - 1)


def _unzigzag(z):
    return (z >> 1) ^ -(z & 1)


class _AdaptiveModel:
    """Frequency counts over bit-length classes, rescaled to stay below 2^16."""

    def __init__(self):
        self.freq = [1] * N_CLASSES
        self.total = N_CLASSES

    def interval(self, s):
        start = sum(self.freq[:s])
        return start, self.freq[s]

    def find(self, target):
        acc = 0
        for s, f in enumerate(self.freq):
            if target < acc + f:
                return s, acc
            acc += f
        raise ValueError("corrupt location stream")

    def update(self, s):
        self.freq[s] += _INC
        self.total += _INC
        if self.total >= _LIMIT:
            self.freq = [(f + 1) // 2 for f in self.freq]
            self.total = sum(self.freq)


def _put_bits(enc, value, n):
    while n > 0:
        chunk = min(n, 16)
        n -= chunk
        enc.encode((value >> n) & ((1 << chunk) - 1), 1, 1 << chunk)


def _get_bits(dec, n):
    value = 0
    while n > 0:
        chunk = min(n, 16)
        n -= chunk
        v = dec.decode_target(1 << chunk)
        dec.consume(v, 1)
        value = (value << chunk) | v
    return value


def encode_grid(q) -> bytes:
    """Code grid points in the given order."""
    q = np.asarray(q, dtype=np.int64).reshape(-1, 3)
    deltas = np.diff(np.vstack([np.zeros((1, 3), np.int64), q]), axis=0)
    z = _zigzag(deltas).tolist()
    models = [_AdaptiveModel() for _ in range(3)]
    enc = RangeEncoder()
    for row in z:
        for axis, v in enumerate(row):
            m = models[axis]
            c = int(v).bit_length()
            start, freq = m.interval(c)
            enc.encode(start, freq, m.total)
            m.update(c)
            if c >= 2:
                _put_bits(enc, v, c - 1)  # leading one is implied by the class
    return enc.finish()


def decode_grid(data, count: int):
    """Inverse of :func:`encode_grid`; returns ``(q, bytes_used)``."""
    dec = RangeDecoder(data)
    models = [_AdaptiveModel() for _ in range(3)]
    z = np.zeros((count, 3), dtype=np.int64)
    for i in range(count):
        for axis in range(3):
            m = models[axis]
            c, start = m.find(dec.decode_target(m.total))
            dec.consume(start, m.freq[c])
            m.update(c)
            if c == 0:
                v = 0
            elif c == 1:
                v = 1
            else:
                v = (1 << (c - 1)) | _get_bits(dec, c - 1)
            z[i, axis] = v
    q = np.cumsum(_unzigzag(z), axis=0)
    return q, dec.bytes_consumed


def encode_locations(points, step: float | None = None, origin=None) -> bytes:
    """Quantize, Morton-sort and code anchor locations."""
    step = default_step(points) if step is None else step
    origin = default_origin(points) if origin is None else origin
    q = quantize_grid(points, origin, step)
    return encode_grid(q[morton_order(q)])


def decode_locations(data, count: int, origin, step) -> np.ndarray:
    """Decoded grid positions (Morton order) mapped back to world space."""
    q, _ = decode_grid(data, count)
    return dequantize_grid(q, origin, step)


def location_bits(points, step: float | None = None) -> float:
    """Exact coded size in bits of the location section for ``points``."""
    if len(np.asarray(points).reshape(-1, 3)) == 0:
        return 0.0
    return 8.0 * len(encode_locations(points, step))
