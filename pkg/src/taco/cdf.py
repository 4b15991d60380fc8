"""Integer cumulative-frequency tables for entropy coding.

Per-element probability models are discretized into integer frequency tables
whose totals are exactly ``2**precision``.  The quantization uses
largest-remainder rounding with a decodability floor of one count per symbol,
so that every in-range symbol keeps nonzero coded probability while per-bin
error stays below one count whenever the rounding budget allows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import CodingError

# Refuse to build tables whose backing matrix would exceed this many cells;
# reaching it means the predicted scales are degenerate.
_MAX_TABLE_CELLS = 1 << 27


@dataclass(frozen=True)
class CdfTable:
    """Per-element integer CDFs over symbol ranges [-L_i, L_i].

    ``cdf`` holds one row per coded element; row ``i`` is valid through column
    ``lengths[i]`` (inclusive), starts at 0, and ends at ``2**precision``.
    ``offsets[i]`` is the integer symbol value of the row's first bin, so a
    symbol ``s`` maps to local bin ``s - offsets[i]``.
    """

    cdf: np.ndarray  # (n, max_len + 1) int32
    lengths: np.ndarray  # (n,) int32
    offsets: np.ndarray  # (n,) int32
    precision: int

    @property
    def total(self) -> int:
        return 1 << self.precision

    @property
    def num_rows(self) -> int:
        return int(self.cdf.shape[0])

    def row(self, i: int) -> np.ndarray:
        return self.cdf[i, : self.lengths[i] + 1]

    def validate(self) -> None:
        """Check structural invariants; raises CodingError on violation."""
        if self.cdf.ndim != 2 or len(self.lengths) != self.num_rows:
            raise CodingError("CDF matrix and lengths disagree")
        firsts = self.cdf[:, 0]
        if np.any(firsts != 0):
            raise CodingError("CDF rows must start at 0")
        lasts = np.take_along_axis(
            self.cdf, self.lengths[:, None].astype(np.int64), axis=1
        )[:, 0]
        if np.any(lasts != self.total):
            raise CodingError(f"CDF rows must end at {self.total}")
        cols = np.arange(self.cdf.shape[1] - 1)[None, :]
        diffs = np.diff(self.cdf.astype(np.int64), axis=1)
        in_range = cols < self.lengths[:, None]
        if np.any(diffs[in_range] <= 0):
            raise CodingError("CDF rows must be strictly increasing over their range")

    def implied_probabilities(self, symbols: np.ndarray) -> np.ndarray:
        """Probability each table assigns to the given symbol values."""
        local = np.asarray(symbols).reshape(-1) - self.offsets
        if np.any(local < 0) or np.any(local >= self.lengths):
            raise CodingError("symbol outside its code table range")
        rows = np.arange(self.num_rows)
        freq = self.cdf[rows, local + 1] - self.cdf[rows, local]
        return freq.astype(np.float64) / self.total


def quantize_pmf_rows(
    pmf: np.ndarray, lengths: np.ndarray, precision: int
) -> np.ndarray:
    """Round probability rows to integer frequencies summing to 2**precision.

    Columns at or beyond each row's length are ignored.  Rounding is largest
    remainder, with symbols that would land on zero served first so that every
    coded symbol keeps at least one count.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n, width = pmf.shape
    total = 1 << precision
    cols = np.arange(width)[None, :]
    valid = cols < lengths[:, None]

    mass = np.where(valid, np.maximum(pmf, 0.0), 0.0)
    row_sums = mass.sum(axis=1, keepdims=True)
    if np.any(row_sums <= 0):
        raise CodingError("probability row has no mass inside its symbol range")
    target = mass / row_sums * total

    freq = np.floor(target).astype(np.int64)
    budget = total - freq.sum(axis=1)
    # Bump priority: first any in-range bin that would otherwise be zero
    # (they must stay codable), then the largest remainders.
    remainder = target - freq
    priority = np.where(valid, remainder + np.where(freq == 0, 2.0, 0.0), -1.0)
    order = np.argsort(-priority, axis=1, kind="stable")
    bump = np.zeros_like(freq)
    np.put_along_axis(
        bump, order, (cols < np.minimum(budget, lengths)[:, None]).astype(np.int64), axis=1
    )
    freq += bump

    # Any zeros left (budget exhausted) are raised to one count, paid for by
    # the richest bins of the same row.
    zero = valid & (freq == 0)
    deficit = zero.sum(axis=1)
    freq[zero] = 1
    while np.any(deficit > 0):
        donor_order = np.argsort(-freq, axis=1, kind="stable")
        sorted_freq = np.take_along_axis(freq, donor_order, axis=1)
        donatable = sorted_freq > 1
        take = donatable & (np.cumsum(donatable, axis=1) <= deficit[:, None])
        if not take.any():
            raise CodingError("cannot enforce nonzero frequencies at this precision")
        np.put_along_axis(freq, donor_order, sorted_freq - take, axis=1)
        deficit = deficit - take.sum(axis=1)
    return freq


def assemble_cdf(freq: np.ndarray, lengths: np.ndarray, offsets: np.ndarray,
                 precision: int) -> CdfTable:
    """Turn integer frequency rows into a :class:`CdfTable`."""
    n, width = freq.shape
    cdf = np.zeros((n, width + 1), dtype=np.int32)
    cdf[:, 1:] = np.cumsum(freq, axis=1)
    return CdfTable(
        cdf=cdf,
        lengths=np.asarray(lengths, dtype=np.int32),
        offsets=np.asarray(offsets, dtype=np.int32),
        precision=precision,
    )


def build_gaussian_tables(
    scales: np.ndarray,
    precision: int = 16,
    tail_mass: float = 1e-6,
    scale_min: float = 0.11,
    scale_max: float = 256.0,
    chunk_size: int = 16384,
) -> CdfTable:
    """Integer CDFs for mean-removed rounded Gaussians, one row per element.

    Each element's symbol range [-L, L] is the smallest covering all but
    ``tail_mass`` of its distribution.  Means never enter: symbols are coded
    relative to their (real-valued) means, so only scales shape the tables.
    """
    if not 12 <= precision <= 16:
        raise ValueError(f"precision must be in [12, 16], got {precision}")
    if not 0 < tail_mass < 1:
        raise ValueError(f"tail_mass must be in (0, 1), got {tail_mass}")
    sigma = np.clip(np.asarray(scales, dtype=np.float64).reshape(-1),
                    scale_min, scale_max)
    n = sigma.shape[0]
    quantile = float(-ndtri(tail_mass / 2))
    half_range = np.maximum(
        1, np.ceil(sigma * quantile - 0.5 + 1e-9).astype(np.int64)
    )
    lengths = 2 * half_range + 1
    max_len = int(lengths.max())
    if n * (max_len + 1) > _MAX_TABLE_CELLS:
        raise CodingError(
            "code tables would be degenerately large; predicted scales are "
            f"implausible (max length {max_len} over {n} elements)"
        )

    cdf = np.zeros((n, max_len + 1), dtype=np.int32)
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        sig = sigma[start:stop, None]
        half = half_range[start:stop]
        lens = lengths[start:stop]
        local_max = int(lens.max())
        value = np.arange(local_max)[None, :] - half[:, None]
        pmf = ndtr((value + 0.5) / sig) - ndtr((value - 0.5) / sig)
        freq = quantize_pmf_rows(pmf, lens, precision)
        cdf[start:stop, 1 : local_max + 1] = np.cumsum(freq, axis=1)
    return CdfTable(
        cdf=cdf,
        lengths=lengths.astype(np.int32),
        offsets=(-half_range).astype(np.int32),
        precision=precision,
    )


def clamp_symbols(symbols: np.ndarray, table: CdfTable) -> np.ndarray:
    """Clip symbol values into each element's coded range [-L_i, L_i]."""
    flat = np.asarray(symbols, dtype=np.int64).reshape(-1)
    low = table.offsets.astype(np.int64)
    high = low + table.lengths - 1
    return np.clip(flat, low, high)
