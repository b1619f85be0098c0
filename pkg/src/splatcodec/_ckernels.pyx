# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: tile rasterizer (forward/backward) and range coder.

Semantics mirror ``_pykernels`` exactly; see that module for the reference
description of every routine.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, floor, ceil
from libc.stdint cimport uint8_t, uint32_t, uint64_t, int64_t

cnp.import_array()

DEF SKIP_POWER = 25.0
DEF ALPHA_MAX = 0.99
DEF T_EXIT = 1e-4
DEF TOP = 16777216  # 2**24


def _tile_lists(double[:, ::1] means, double[::1] radii, int width, int height, int tile):
    """CSR lists of splat indices (ascending) overlapping each tile."""
    cdef int M = means.shape[0]
    cdef int tx_n = (width + tile - 1) // tile
    cdef int ty_n = (height + tile - 1) // tile
    cdef int n_tiles = tx_n * ty_n
    cdef cnp.int64_t[::1] counts = np.zeros(n_tiles + 1, dtype=np.int64)
    cdef cnp.int32_t[:, ::1] rect = np.zeros((M, 4), dtype=np.int32)
    cdef int i, tx, ty, x0, x1, y0, y1
    cdef double lo, hi
    for i in range(M):
        # pixel centres sit at integer + 0.5
        lo = floor((means[i, 0] - radii[i] - 0.5) / tile)
        hi = floor((means[i, 0] + radii[i] - 0.5) / tile)
        x0 = <int>min(max(lo, 0.0), <double>tx_n)
        x1 = <int>max(min(hi, tx_n - 1.0), -1.0)
        lo = floor((means[i, 1] - radii[i] - 0.5) / tile)
        hi = floor((means[i, 1] + radii[i] - 0.5) / tile)
        y0 = <int>min(max(lo, 0.0), <double>ty_n)
        y1 = <int>max(min(hi, ty_n - 1.0), -1.0)
        rect[i, 0] = x0
        rect[i, 1] = x1
        rect[i, 2] = y0
        rect[i, 3] = y1
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * tx_n + tx + 1] += 1
    for i in range(n_tiles):
        counts[i + 1] += counts[i]
    cdef cnp.int64_t[::1] fill = np.array(counts[:n_tiles], dtype=np.int64)
    cdef cnp.int32_t[::1] items = np.empty(counts[n_tiles], dtype=np.int32)
    for i in range(M):
        if rect[i, 1] < rect[i, 0] or rect[i, 3] < rect[i, 2]:
            continue
        for ty in range(rect[i, 2], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 1] + 1):
                items[fill[ty * tx_n + tx]] = i
                fill[ty * tx_n + tx] += 1
    return np.asarray(counts), np.asarray(items), tx_n, ty_n


def rasterize_forward(double[:, ::1] means, double[:, ::1] conics, double[::1] opacity,
                      double[:, ::1] colors, double[::1] radii, int width, int height,
                      double[::1] background, bint early_exit, int tile=16, int nthreads=1):
    counts_np, items_np, tx_n, ty_n = _tile_lists(means, radii, width, height, tile)
    cdef cnp.int64_t[::1] counts = counts_np
    cdef cnp.int32_t[::1] items = items_np
    cdef int n_tiles = tx_n * ty_n
    cdef int txn = tx_n
    image_np = np.zeros((height, width, 3))
    final_t_np = np.ones((height, width))
    n_contrib_np = np.zeros((height, width), dtype=np.int32)
    cdef double[:, :, ::1] image = image_np
    cdef double[:, ::1] final_t = final_t_np
    cdef cnp.int32_t[:, ::1] n_contrib = n_contrib_np
    cdef int t, x, y, x_start, y_start, j, e, last
    cdef double px, py, dx, dy, power, alpha, T, c0, c1, c2
    for t in prange(n_tiles, nogil=True, num_threads=nthreads, schedule="static"):
        x_start = (t % txn) * tile
        y_start = (t // txn) * tile
        for y in range(y_start, min(y_start + tile, height)):
            for x in range(x_start, min(x_start + tile, width)):
                px = x + 0.5
                py = y + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                last = 0
                for e in range(counts[t], counts[t + 1]):
                    j = items[e]
                    dx = px - means[j, 0]
                    dy = py - means[j, 1]
                    power = conics[j, 0] * dx * dx + 2.0 * conics[j, 1] * dx * dy + conics[j, 2] * dy * dy
                    if power > SKIP_POWER:
                        continue
                    last = j + 1
                    alpha = opacity[j] * exp(-0.5 * power)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    c0 = c0 + colors[j, 0] * alpha * T
                    c1 = c1 + colors[j, 1] * alpha * T
                    c2 = c2 + colors[j, 2] * alpha * T
                    T = T * (1.0 - alpha)
                    if early_exit and T < T_EXIT:
                        break
                image[y, x, 0] = c0 + T * background[0]
                image[y, x, 1] = c1 + T * background[1]
                image[y, x, 2] = c2 + T * background[2]
                final_t[y, x] = T
                n_contrib[y, x] = last
    return image_np, final_t_np, n_contrib_np


def rasterize_backward(double[:, ::1] means, double[:, ::1] conics, double[::1] opacity,
                       double[:, ::1] colors, double[::1] radii, int width, int height,
                       double[::1] background, double[:, ::1] final_t, cnp.int32_t[:, ::1] n_contrib,
                       double[:, :, ::1] grad_image, int tile=16, int nthreads=1):
    counts_np, items_np, tx_n, ty_n = _tile_lists(means, radii, width, height, tile)
    cdef cnp.int64_t[::1] counts = counts_np
    cdef cnp.int32_t[::1] items = items_np
    cdef int n_tiles = tx_n * ty_n
    cdef int txn = tx_n
    cdef int M = means.shape[0]
    cdef int64_t n_pairs = counts[n_tiles]
    # one gradient slot per (tile, splat) pair keeps the reduction order fixed
    pair_np = np.zeros((n_pairs, 9))
    cdef double[:, ::1] pair = pair_np
    cdef int t, x, y, x_start, y_start, j, last
    cdef int64_t e
    cdef double px, py, dx, dy, power, G, alpha_raw, alpha, T, Tj, b0, b1, b2
    cdef double g0, g1, g2, dl_dalpha, dl_dpower
    for t in prange(n_tiles, nogil=True, num_threads=nthreads, schedule="static"):
        x_start = (t % txn) * tile
        y_start = (t // txn) * tile
        for y in range(y_start, min(y_start + tile, height)):
            for x in range(x_start, min(x_start + tile, width)):
                px = x + 0.5
                py = y + 0.5
                T = final_t[y, x]
                last = n_contrib[y, x]
                g0 = grad_image[y, x, 0]
                g1 = grad_image[y, x, 1]
                g2 = grad_image[y, x, 2]
                b0 = T * background[0]
                b1 = T * background[1]
                b2 = T * background[2]
                e = counts[t + 1] - 1
                while e >= counts[t]:
                    j = items[e]
                    if j < last:
                        dx = px - means[j, 0]
                        dy = py - means[j, 1]
                        power = conics[j, 0] * dx * dx + 2.0 * conics[j, 1] * dx * dy + conics[j, 2] * dy * dy
                        if power <= SKIP_POWER:
                            G = exp(-0.5 * power)
                            alpha_raw = opacity[j] * G
                            alpha = alpha_raw
                            if alpha > ALPHA_MAX:
                                alpha = ALPHA_MAX
                            Tj = T / (1.0 - alpha)
                            pair[e, 6] += g0 * alpha * Tj
                            pair[e, 7] += g1 * alpha * Tj
                            pair[e, 8] += g2 * alpha * Tj
                            dl_dalpha = (g0 * (colors[j, 0] * Tj - b0 / (1.0 - alpha))
                                         + g1 * (colors[j, 1] * Tj - b1 / (1.0 - alpha))
                                         + g2 * (colors[j, 2] * Tj - b2 / (1.0 - alpha)))
                            b0 = b0 + colors[j, 0] * alpha * Tj
                            b1 = b1 + colors[j, 1] * alpha * Tj
                            b2 = b2 + colors[j, 2] * alpha * Tj
                            T = Tj
                            if alpha_raw <= ALPHA_MAX:
                                pair[e, 5] += dl_dalpha * G
                                dl_dpower = -0.5 * dl_dalpha * opacity[j] * G
                                pair[e, 0] += -dl_dpower * (2.0 * conics[j, 0] * dx + 2.0 * conics[j, 1] * dy)
                                pair[e, 1] += -dl_dpower * (2.0 * conics[j, 1] * dx + 2.0 * conics[j, 2] * dy)
                                pair[e, 2] += dl_dpower * dx * dx
                                pair[e, 3] += dl_dpower * 2.0 * dx * dy
                                pair[e, 4] += dl_dpower * dy * dy
                    e = e - 1
    grads_np = np.zeros((M, 9))
    cdef double[:, ::1] grads = grads_np
    cdef int k
    for e in range(n_pairs):
        j = items[e]
        for k in range(9):
            grads[j, k] += pair[e, k]
    return grads_np[:, 0:2].copy(), grads_np[:, 2:5].copy(), grads_np[:, 5].copy(), grads_np[:, 6:9].copy()


cdef class RangeEncoder:
    """Carry-propagating range encoder (32-bit range, byte output)."""

    cdef uint64_t low
    cdef uint32_t range_
    cdef uint8_t cache
    cdef uint64_t cache_size
    cdef bytearray out

    def __init__(self):
        self.low = 0
        self.range_ = 0xFFFFFFFF
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    cdef void _shift_low(self):
        cdef uint8_t temp
        if <uint32_t>self.low < <uint32_t>0xFF000000 or (self.low >> 32) != 0:
            temp = self.cache
            while True:
                self.out.append(<uint8_t>((temp + <uint8_t>(self.low >> 32)) & 0xFF))
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = <uint8_t>((self.low >> 24) & 0xFF)
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    cdef inline void _encode(self, uint32_t start, uint32_t freq, uint32_t total):
        cdef uint32_t r = self.range_ // total
        self.low += <uint64_t>r * start
        self.range_ = r * freq
        while self.range_ < TOP:
            self.range_ <<= 8
            self._shift_low()

    def encode(self, uint32_t start, uint32_t freq, uint32_t total):
        if freq == 0 or start + freq > total or total > 65536:
            raise ValueError("invalid frequency interval")
        self._encode(start, freq, total)

    def encode_cdf(self, cnp.uint32_t[::1] cdf, cnp.int64_t[::1] row_start, cnp.int64_t[::1] index):
        """Encode symbol ``index[i]`` of row ``i`` of a flat 2**16-total CDF table."""
        cdef Py_ssize_t i, n = index.shape[0]
        cdef int64_t p
        cdef uint32_t lo, hi
        for i in range(n):
            p = row_start[i] + index[i]
            lo = cdf[p]
            hi = cdf[p + 1]
            if hi <= lo:
                raise ValueError("zero-probability symbol")
            self._encode(lo, hi - lo, 65536)

    def finish(self):
        cdef int i
        for i in range(5):
            self._shift_low()
        return bytes(self.out)


cdef class RangeDecoder:
    cdef const uint8_t[::1] data
    cdef Py_ssize_t pos
    cdef uint32_t range_
    cdef uint32_t code
    cdef uint32_t r

    def __init__(self, data):
        self.data = memoryview(bytes(data)).cast("B")
        self.pos = 0
        self.range_ = 0xFFFFFFFF
        self.code = 0
        cdef int i
        for i in range(5):
            self.code = (self.code << 8) | self._next_byte()

    cdef inline uint32_t _next_byte(self) except? 0xFFFF:
        if self.pos >= self.data.shape[0]:
            raise EOFError("unexpected end of bitstream")
        self.pos += 1
        return self.data[self.pos - 1]

    @property
    def bytes_consumed(self):
        return self.pos

    def decode_target(self, uint32_t total):
        self.r = self.range_ // total
        cdef uint32_t v = self.code // self.r
        return v if v < total else total - 1

    cdef inline int _consume(self, uint32_t start, uint32_t freq) except -1:
        self.code -= self.r * start
        self.range_ = self.r * freq
        while self.range_ < TOP:
            self.code = (self.code << 8) | self._next_byte()
            self.range_ <<= 8
        return 0

    def consume(self, uint32_t start, uint32_t freq):
        self._consume(start, freq)

    def decode_cdf(self, cnp.uint32_t[::1] cdf, cnp.int64_t[::1] row_start, cnp.int64_t[::1] row_len):
        """Decode one symbol per row of a flat 2**16-total CDF table."""
        cdef Py_ssize_t i, n = row_start.shape[0]
        out_np = np.empty(n, dtype=np.int64)
        cdef cnp.int64_t[::1] out = out_np
        cdef int64_t lo, hi, mid, base
        cdef uint32_t target
        for i in range(n):
            self.r = self.range_ // 65536
            target = self.code // self.r
            if target > 65535:
                target = 65535
            base = row_start[i]
            lo = 0
            hi = row_len[i]
            while hi - lo > 1:
                mid = (lo + hi) >> 1
                if cdf[base + mid] <= target:
                    lo = mid
                else:
                    hi = mid
            out[i] = lo
            self._consume(cdf[base + lo], cdf[base + lo + 1] - cdf[base + lo])
        return out_np
