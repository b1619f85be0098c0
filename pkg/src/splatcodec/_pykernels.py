"""Pure numpy/Python implementations of the hot loops.

Reference semantics shared with the compiled module:

* Splats arrive already sorted in compositing order. Pixel ``(x, y)`` is
  sampled at its centre ``(x + 0.5, y + 0.5)``.
* ``power = a dx^2 + 2 b dx dy + c dy^2`` with conic ``(a, b, c)`` and
  ``d = pixel - mean``; pairs with ``power > 25`` (beyond five standard
  deviations, where the Gaussian falls below 3.7e-6) contribute nothing.
* ``alpha = min(0.99, opacity * exp(-power / 2))``; front-to-back
  compositing; optional early exit once transmittance drops below 1e-4
  (the splat that crosses the threshold is still composited).
* ``n_contrib`` stores one past the index of the last splat composited per pixel.
"""

from __future__ import annotations

import numpy as np

SKIP_POWER = 25.0
ALPHA_MAX = 0.99
T_EXIT = 1e-4
TOP = 1 << 24
scalar_exp = np.exp


def _pixel_box(mean, radius, width, height):
    x0 = max(int(np.ceil(mean[0] - radius - 0.5)), 0)
    x1 = min(int(np.floor(mean[0] + radius - 0.5)), width - 1)
    y0 = max(int(np.ceil(mean[1] - radius - 0.5)), 0)
    y1 = min(int(np.floor(mean[1] + radius - 0.5)), height - 1)
    return x0, x1, y0, y1


def _alpha(mean, conic, opacity, xs, ys):
    dx = xs - mean[0]
    dy = ys - mean[1]
    power = conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy
    live = power <= SKIP_POWER
    g = np.where(live, scalar_exp(-0.5 * np.where(live, power, 0.0)), 0.0)
    alpha_raw = opacity * g
    return dx, dy, g, alpha_raw, np.minimum(alpha_raw, ALPHA_MAX), live


def rasterize_forward(means, conics, opacity, colors, radii, width, height,
                      background, early_exit, tile=16, nthreads=1):
    color = np.zeros((height, width, 3))
    T = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int32)
    done = np.zeros((height, width), dtype=bool)
    for j in range(len(means)):
        if not np.isfinite(radii[j]):
            continue
        x0, x1, y0, y1 = _pixel_box(means[j], radii[j], width, height)
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64) + 0.5
        active = ~done[y0:y1 + 1, x0:x1 + 1]
        if not active.any():
            continue
        _, _, _, _, alpha, live = _alpha(means[j], conics[j], opacity[j], xs, ys)
        active &= live
        alpha = np.where(active, alpha, 0.0)
        t = T[y0:y1 + 1, x0:x1 + 1]
        c = color[y0:y1 + 1, x0:x1 + 1]
        for ch in range(3):
            c[..., ch] = np.where(active, c[..., ch] + colors[j, ch] * alpha * t, c[..., ch])
        t_new = np.where(active, t * (1.0 - alpha), t)
        T[y0:y1 + 1, x0:x1 + 1] = t_new
        n_contrib[y0:y1 + 1, x0:x1 + 1][active] = j + 1
        if early_exit:
            done[y0:y1 + 1, x0:x1 + 1] |= active & (t_new < T_EXIT)
    image = color + T[..., None] * np.asarray(background)
    return image, T, n_contrib


def rasterize_backward(means, conics, opacity, colors, radii, width, height,
                       background, final_t, n_contrib, grad_image, tile=16, nthreads=1):
    M = len(means)
    g_mean = np.zeros((M, 2))
    g_conic = np.zeros((M, 3))
    g_opacity = np.zeros(M)
    g_color = np.zeros((M, 3))
    T = final_t.copy()
    behind = T[..., None] * np.asarray(background)
    for j in range(M - 1, -1, -1):
        if not np.isfinite(radii[j]):
            continue
        x0, x1, y0, y1 = _pixel_box(means[j], radii[j], width, height)
        if x1 < x0 or y1 < y0:
            continue
        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        ys, xs = np.mgrid[sl].astype(np.float64) + 0.5
        dx, dy, g, alpha_raw, alpha, live = _alpha(means[j], conics[j], opacity[j], xs, ys)
        m = live & (n_contrib[sl] > j)
        if not m.any():
            continue
        gi = grad_image[sl]
        t = T[sl]
        tj = np.where(m, t / (1.0 - alpha), t)
        b = behind[sl]
        w = np.where(m, alpha * tj, 0.0)
        g_color[j] += (gi * w[..., None]).sum(axis=(0, 1))
        dl_dalpha = (gi * (colors[j] * tj[..., None] - b / (1.0 - alpha)[..., None])).sum(-1)
        dl_dalpha = np.where(m, dl_dalpha, 0.0)
        behind[sl] = b + colors[j] * w[..., None]
        T[sl] = tj
        free = m & (alpha_raw <= ALPHA_MAX)
        dl_dalpha = np.where(free, dl_dalpha, 0.0)
        g_opacity[j] += (dl_dalpha * g).sum()
        dl_dpower = -0.5 * dl_dalpha * opacity[j] * g
        a, bb, c = conics[j]
        g_mean[j, 0] += (-dl_dpower * (2.0 * a * dx + 2.0 * bb * dy)).sum()
        g_mean[j, 1] += (-dl_dpower * (2.0 * bb * dx + 2.0 * c * dy)).sum()
        g_conic[j] += [(dl_dpower * dx * dx).sum(), (dl_dpower * 2.0 * dx * dy).sum(),
                       (dl_dpower * dy * dy).sum()]
    return g_mean, g_conic, g_opacity, g_color


class RangeEncoder:
    """Carry-propagating range encoder (32-bit range, byte output)."""

    def __init__(self):
        self.low = 0
        self.range = 0xFFFFFFFF
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low >= 1 << 32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start, freq, total):
        if freq <= 0 or start + freq > total or total > 65536:
            raise ValueError("invalid frequency interval")
        r = self.range // total
        self.low += r * start
        self.range = r * freq
        while self.range < TOP:
            self.range = (self.range << 8) & 0xFFFFFFFF
            self._shift_low()

    def encode_cdf(self, cdf, row_start, index):
        for base, idx in zip(row_start.tolist(), index.tolist()):
            lo, hi = int(cdf[base + idx]), int(cdf[base + idx + 1])
            if hi <= lo:
                raise ValueError("zero-probability symbol")
            self.encode(lo, hi - lo, 65536)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0
        self.range = 0xFFFFFFFF
        self.code = 0
        self.r = 1
        for _ in range(5):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self):
        if self.pos >= len(self.data):
            raise EOFError("unexpected end of bitstream")
        self.pos += 1
        return self.data[self.pos - 1]

    @property
    def bytes_consumed(self):
        return self.pos

    def decode_target(self, total):
        self.r = self.range // total
        return min(self.code // self.r, total - 1)

    def consume(self, start, freq):
        self.code -= self.r * start
        self.range = self.r * freq
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & 0xFFFFFFFF
            self.range = (self.range << 8) & 0xFFFFFFFF

    def decode_cdf(self, cdf, row_start, row_len):
        out = np.empty(len(row_start), dtype=np.int64)
        cdf_list = cdf.tolist()
        for i, (base, n) in enumerate(zip(row_start.tolist(), row_len.tolist())):
            target = self.decode_target(65536)
            lo, hi = 0, n
            while hi - lo > 1:
                mid = (lo + hi) >> 1
                if cdf_list[base + mid] <= target:
                    lo = mid
                else:
                    hi = mid
            out[i] = lo
            self.consume(cdf_list[base + lo], cdf_list[base + lo + 1] - cdf_list[base + lo])
        return out
