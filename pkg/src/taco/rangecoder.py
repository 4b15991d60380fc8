"""Reference entropy coder: a 64-bit renormalizing, carry-less range coder.

The coder consumes one integer CDF row per symbol (see :class:`~taco.cdf.CdfTable`),
emits bytes most-significant first, and needs no carry propagation: when the
active interval straddles a byte boundary with too little room left, the
interval is truncated down to the boundary so the pending top byte can be
released immediately.  Flushing writes the 8 bytes of ``low``, so an empty
payload is exactly 8 bytes and decoding n symbols never reads past
``8 + bytes consumed during renormalization``.

This implementation favors auditability over speed; the optional native rANS
coder (``taco.rans``) provides the fast path behind the same table format.
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np

from .cdf import CdfTable
from .errors import CodingError

_BITS = 64
_TOP = 1 << (_BITS - 8)  # top byte settled once low and high share it
_BOTTOM = 1 << (_BITS - 16)  # renormalize below this to keep division exact
_MASK = (1 << _BITS) - 1
FLUSH_BYTES = _BITS // 8


def _check_symbols(symbols: np.ndarray, table: CdfTable) -> np.ndarray:
    """Map symbol values to local bin indices, rejecting out-of-range ones."""
    flat = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if flat.shape[0] != table.num_rows:
        raise CodingError(
            f"got {flat.shape[0]} symbols for {table.num_rows} code tables"
        )
    local = flat - table.offsets
    bad = (local < 0) | (local >= table.lengths)
    if bad.any():
        i = int(np.argmax(bad))
        lo = int(table.offsets[i])
        hi = lo + int(table.lengths[i]) - 1
        raise CodingError(
            f"symbol {int(flat[i])} at index {i} outside its code table "
            f"range [{lo}, {hi}]"
        )
    return local


def range_encode(symbols: np.ndarray, table: CdfTable) -> bytes:
    """Encode integer symbols against their per-element CDF rows."""
    local = _check_symbols(symbols, table)
    n = table.num_rows
    precision = table.precision
    out = bytearray()
    low = 0
    range_ = _MASK

    if n:
        rows = np.arange(n)
        cum_lo = table.cdf[rows, local].tolist()
        cum_hi = table.cdf[rows, local + 1].tolist()
        for cl, ch in zip(cum_lo, cum_hi):
            r = range_ >> precision
            low += r * cl
            range_ = r * (ch - cl)
            while (low ^ (low + range_)) < _TOP or range_ < _BOTTOM:
                if not (low ^ (low + range_)) < _TOP:
                    # interval straddles a byte boundary: truncate to it
                    range_ = (_MASK + 1 - low) & (_BOTTOM - 1)
                out.append((low >> (_BITS - 8)) & 0xFF)
                low = (low << 8) & _MASK
                range_ <<= 8

    for _ in range(FLUSH_BYTES):
        out.append((low >> (_BITS - 8)) & 0xFF)
        low = (low << 8) & _MASK
    return bytes(out)


def range_decode(data: bytes, table: CdfTable, n: int | None = None) -> np.ndarray:
    """Decode ``n`` symbols (default: one per table row) from ``data``."""
    if n is None:
        n = table.num_rows
    if n > table.num_rows:
        raise CodingError(f"asked for {n} symbols but only {table.num_rows} tables")
    precision = table.precision
    total_minus_1 = (1 << precision) - 1
    lengths = table.lengths.tolist()
    offsets = table.offsets.tolist()
    cdf_rows = table.cdf.tolist()

    pos = 0
    limit = len(data)

    def next_byte() -> int:
        nonlocal pos
        if pos >= limit:
            raise CodingError("compressed stream truncated")
        b = data[pos]
        pos += 1
        return b

    state = 0
    for _ in range(FLUSH_BYTES):
        state = (state << 8) | next_byte()

    out = np.empty(n, dtype=np.int64)
    low = 0
    range_ = _MASK
    for i in range(n):
        r = range_ >> precision
        t = (state - low) // r
        if t < 0:
            t = 0
        elif t > total_minus_1:
            t = total_minus_1
        row = cdf_rows[i]
        length = lengths[i]
        k = bisect_right(row, t, 0, length + 1) - 1
        if k >= length:
            k = length - 1
        out[i] = k + offsets[i]
        cl = row[k]
        low += r * cl
        range_ = r * (row[k + 1] - cl)
        while (low ^ (low + range_)) < _TOP or range_ < _BOTTOM:
            if not (low ^ (low + range_)) < _TOP:
                range_ = (_MASK + 1 - low) & (_BOTTOM - 1)
            state = ((state << 8) | next_byte()) & _MASK
            low = (low << 8) & _MASK
            range_ <<= 8
    return out
