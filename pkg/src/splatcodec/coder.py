"""Range coding of symbol streams under model-supplied pmfs.

Probabilities are turned into 16-bit frequency tables (every entry at least
one count, totals exactly 2^16). Gaussian-modelled symbols are coded over a
window around the predicted mean plus an escape entry; escaped values follow
the range-coded bytes as raw little-endian int32.
"""

from __future__ import annotations

import bisect
import math

import numpy as np
from scipy.special import ndtr

from . import _backend
from .entropy import PMF_FLOOR, SUPPORT

PROB_BITS = 16
TOTAL = 1 << PROB_BITS
MIN_WINDOW = 16
MAX_WINDOW = 1024


def RangeEncoder():
    return _backend.kernels.RangeEncoder()


def RangeDecoder(data):
    return _backend.kernels.RangeDecoder(data)


# -- frequency tables ---------------------------------------------------------

def ragged_cdf(pmf, row_len):
    """Cumulative 16-bit tables for concatenated pmf rows.

    ``pmf`` holds all rows back to back, ``row_len[i]`` entries for row ``i``.
    Each entry gets ``max(1, round(p * 2^16))`` counts after normalizing the
    row, which keeps the table unbiased against the model in the tails. The
    rounding remainder is settled on the row's largest entries, first most
    probable first. Returns ``(cdf, row_start)`` where row ``i`` occupies
    ``cdf[row_start[i] : row_start[i] + row_len[i] + 1]``.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    row_len = np.asarray(row_len, dtype=np.int64)
    if len(row_len) == 0:
        return np.zeros(0, dtype=np.uint32), np.zeros(0, dtype=np.int64)
    if np.any(row_len < 1) or np.any(row_len >= TOTAL):
        raise ValueError("pmf rows must have between 1 and 65535 entries")
    if np.any(~np.isfinite(pmf)) or np.any(pmf < 0):
        raise ValueError("pmf entries must be finite and non-negative")
    offsets = np.concatenate([[0], np.cumsum(row_len)[:-1]])
    row = np.repeat(np.arange(len(row_len)), row_len)
    sums = np.add.reduceat(pmf, offsets)
    if np.any(sums <= 0):
        raise ValueError("pmf row has no mass")
    freq = np.maximum(1, np.rint(pmf / sums[row] * TOTAL).astype(np.int64))
    rem = TOTAL - np.add.reduceat(freq, offsets)
    local = np.arange(len(pmf)) - offsets[row]
    row_max = np.maximum.reduceat(freq, offsets)
    first_max = np.minimum.reduceat(np.where(freq == row_max[row], local, TOTAL), offsets)
    easy = row_max + rem >= 1
    freq[(offsets + first_max)[easy]] += rem[easy]
    for r in np.flatnonzero(~easy):  # rare: too many entries lifted to one count
        lo = offsets[r]
        freq[lo:lo + row_len[r]] = _crowded_row(pmf[lo:lo + row_len[r]])
    # one extra slot per row for the closing cumulative count
    cdf = np.zeros(len(pmf) + len(row_len), dtype=np.int64)
    starts = offsets + np.arange(len(row_len))
    pos = np.arange(len(pmf)) + row + 1
    np.add.at(cdf, pos, freq)
    csum = np.cumsum(cdf)
    cdf = csum - np.repeat(csum[starts], row_len + 1)
    return cdf.astype(np.uint32), starts


def _crowded_row(p):
    """Counts for a row whose one-count floors leave too little for the rest:
    pin the small entries at one count and share the remaining budget among
    the others in proportion to their probability."""
    pinned = np.zeros(len(p), dtype=bool)
    while True:
        budget = TOTAL - int(pinned.sum())
        free = ~pinned
        share = p[free] / p[free].sum() * budget
        small = share < 1.0
        if not small.any():
            break
        pinned[np.flatnonzero(free)[small]] = True
    freq = np.ones(len(p), dtype=np.int64)
    freq[free] = np.floor(share).astype(np.int64)
    top = np.flatnonzero(free)[np.argmax(freq[free])]
    freq[top] += TOTAL - int(freq.sum())
    return freq


def frequencies(pmf) -> np.ndarray:
    """16-bit frequency table for one pmf (sums to 2^16)."""
    cdf, _ = ragged_cdf(pmf, [len(pmf)])
    return np.diff(cdf.astype(np.int64))


def table_bits(cdf, row_start, index) -> float:
    """Ideal code length in bits of ``index`` under the given tables."""
    lo = cdf[row_start + index].astype(np.float64)
    hi = cdf[row_start + index + 1].astype(np.float64)
    return math.fsum((PROB_BITS - np.log2(hi - lo)).tolist())


# -- generic pmf coding -------------------------------------------------------

def rc_encode(symbols, pmfs) -> bytes:
    """Code ``symbols[i]`` under ``pmfs[i]`` (a pmf over ``0..len-1``).

    ``pmfs`` is either one 1-D pmf shared by every symbol or a sequence with
    one pmf per symbol; repeated pmf objects share a single table.
    """
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if isinstance(pmfs, np.ndarray) and pmfs.ndim == 1:
        rows, which = [pmfs], np.zeros(len(symbols), dtype=np.int64)
    else:
        slot: dict[int, int] = {}
        rows, which = [], np.empty(len(pmfs), dtype=np.int64)
        for i, p in enumerate(pmfs):
            key = id(p)
            if key not in slot:
                slot[key] = len(rows)
                rows.append(p)
            which[i] = slot[key]
        if len(which) != len(symbols):
            raise ValueError("need one pmf per symbol")
    enc = RangeEncoder()
    if len(symbols) == 0:
        return enc.finish()
    rows = [np.asarray(r, dtype=np.float64).reshape(-1) for r in rows]
    row_len = np.array([len(r) for r in rows], dtype=np.int64)
    flat = np.concatenate(rows)
    if np.any(symbols < 0) or np.any(symbols >= row_len[which]):
        raise ValueError("symbol outside pmf support")
    offsets = np.concatenate([[0], np.cumsum(row_len)[:-1]])
    if np.any(flat[offsets[which] + symbols] <= 0):
        raise ValueError("zero-probability symbol")
    cdf, starts = ragged_cdf(flat, row_len)
    enc.encode_cdf(cdf, starts[which], symbols)
    return enc.finish()


def rc_decode(data, provider, count: int) -> list[int]:
    """Decode ``count`` symbols; ``provider(i, decoded)`` returns the pmf of
    symbol ``i`` given the list of symbols decoded so far. A pmf object
    returned more than once must not be modified in between."""
    dec = RangeDecoder(data)
    out: list[int] = []
    tables: dict[int, tuple] = {}  # pmf objects handed out again reuse their table
    for i in range(count):
        pmf = provider(i, out)
        hit = tables.get(id(pmf))
        if hit is None or hit[0] is not pmf:
            arr = np.asarray(pmf, dtype=np.float64)
            hit = tables[id(pmf)] = (pmf, ragged_cdf(arr, [len(arr)])[0].tolist())
        cdf = hit[1]
        target = dec.decode_target(TOTAL)
        s = bisect.bisect_right(cdf, target) - 1
        dec.consume(cdf[s], cdf[s + 1] - cdf[s])
        out.append(s)
    return out


# -- model-specific tables ----------------------------------------------------

def gaussian_windows(tau, rho):
    """Window centre and half-width per symbol for conditional Gaussians."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    rho = np.asarray(rho, dtype=np.float64).reshape(-1)
    centre = np.rint(np.clip(tau, -2.0 ** 31, 2.0 ** 31)).astype(np.int64)
    half = np.clip(np.ceil(8.0 * rho), MIN_WINDOW, MAX_WINDOW).astype(np.int64)
    return centre, half


def gaussian_tables(tau, rho):
    """Tables over ``[c - w, c + w]`` plus a trailing escape entry per symbol.

    Entry probabilities use the same floored discrete Gaussian as the rate
    model; the escape entry carries the floor probability.
    """
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    rho = np.asarray(rho, dtype=np.float64).reshape(-1)
    centre, half = gaussian_windows(tau, rho)
    row_len = 2 * half + 2
    n = len(tau)
    row = np.repeat(np.arange(n), row_len)
    offsets = np.concatenate([[0], np.cumsum(row_len)[:-1]]) if n else np.zeros(0, np.int64)
    local = np.arange(int(row_len.sum())) - offsets[row] if n else np.zeros(0, np.int64)
    v = (centre - half)[row] + local
    d = np.abs(v - tau[row])
    p = np.maximum(ndtr((0.5 - d) / rho[row]) - ndtr((-0.5 - d) / rho[row]), PMF_FLOOR)
    esc = local == (row_len - 1)[row]
    p[esc] = PMF_FLOOR
    cdf, starts = ragged_cdf(p, row_len)
    return cdf, starts, centre, half


def encode_gaussian(symbols, tau, rho) -> bytes:
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    cdf, starts, centre, half = gaussian_tables(tau, rho)
    idx = symbols - centre + half
    escaped = (idx < 0) | (idx > 2 * half)
    idx = np.where(escaped, 2 * half + 1, idx)
    extra = symbols[escaped]
    if np.any(np.abs(extra) > 2 ** 31 - 1):
        raise ValueError("symbol exceeds int32 range")
    enc = RangeEncoder()
    enc.encode_cdf(cdf, starts, idx)
    return enc.finish() + extra.astype("<i4").tobytes()


def decode_gaussian(data, tau, rho):
    """Inverse of :func:`encode_gaussian`; returns ``(symbols, bytes_used)``."""
    cdf, starts, centre, half = gaussian_tables(tau, rho)
    dec = RangeDecoder(data)
    idx = dec.decode_cdf(cdf, starts, 2 * half + 2)
    escaped = idx == 2 * half + 1
    pos = dec.bytes_consumed
    n_esc = int(escaped.sum())
    raw = bytes(data[pos:pos + 4 * n_esc])
    if len(raw) != 4 * n_esc:
        raise EOFError("unexpected end of bitstream")
    symbols = centre - half + idx
    symbols[escaped] = np.frombuffer(raw, dtype="<i4").astype(np.int64)
    return symbols, pos + 4 * n_esc


def factorized_tables(pmf_table, channels: int):
    """Rows of a per-channel factorized model for a ``(B, C)`` symbol block."""
    pmf_table = np.asarray(pmf_table, dtype=np.float64)
    width = pmf_table.shape[1]
    cdf, starts = ragged_cdf(pmf_table.reshape(-1), np.full(len(pmf_table), width))
    return cdf, starts, width


def encode_factorized(symbols, pmf_table) -> bytes:
    """``symbols (B, C)`` within ``[-SUPPORT, SUPPORT]`` under per-channel pmfs."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if np.any(np.abs(symbols) > SUPPORT):
        raise ValueError("support exceeded")
    c = symbols.shape[1]
    cdf, starts, _ = factorized_tables(pmf_table, c)
    enc = RangeEncoder()
    enc.encode_cdf(cdf, np.tile(starts, len(symbols)), (symbols + SUPPORT).reshape(-1))
    return enc.finish()


def decode_factorized(data, pmf_table, count: int):
    pmf_table = np.asarray(pmf_table, dtype=np.float64)
    c = pmf_table.shape[0]
    cdf, starts, width = factorized_tables(pmf_table, c)
    dec = RangeDecoder(data)
    rows = np.tile(starts, count)
    idx = dec.decode_cdf(cdf, rows, np.full(len(rows), width, dtype=np.int64))
    return (idx - SUPPORT).reshape(count, c), dec.bytes_consumed
