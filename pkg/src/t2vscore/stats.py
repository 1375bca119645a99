"""Rank and product-moment correlation statistics.

Kendall's tau is the tie-corrected tau-b variant. Spearman uses average
ranks for ties. Correlations that are undefined (a constant series) raise
:class:`UndefinedCorrelation` rather than returning 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class UndefinedCorrelation(ValueError):
    """Raised when a correlation has no defined value (zero variance, all ties)."""


@dataclass(frozen=True)
class PairedSeries:
    xs: tuple[float, ...]
    ys: tuple[float, ...]

    def __post_init__(self):
        if len(self.xs) != len(self.ys):
            raise ValueError(f"length mismatch: {len(self.xs)} vs {len(self.ys)}")
        if len(self.xs) < 2:
            raise ValueError("need at least 2 paired observations")
        if not all(math.isfinite(v) for v in (*self.xs, *self.ys)):
            raise ValueError("series contain non-finite values")

    @classmethod
    def of(cls, xs: Sequence[float], ys: Sequence[float]) -> "PairedSeries":
        return cls(tuple(float(x) for x in xs), tuple(float(y) for y in ys))


def _as_series(xs, ys=None) -> PairedSeries:
    if isinstance(xs, PairedSeries):
        return xs
    return PairedSeries.of(xs, ys)


def _pearson_arrays(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("zero variance series")
    # sqrt of the product keeps exact +-1 for mirrored inputs
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def pearson(xs, ys=None) -> float:
    """Product-moment correlation. Accepts a PairedSeries or two sequences."""
    p = _as_series(xs, ys)
    return _pearson_arrays(np.asarray(p.xs), np.asarray(p.ys))


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    a = np.asarray(values, dtype=float)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a), dtype=float)
    sorted_vals = a[order]
    i = 0
    n = len(a)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys=None) -> float:
    p = _as_series(xs, ys)
    return _pearson_arrays(average_ranks(p.xs), average_ranks(p.ys))


def _count_tie_pairs(sorted_vals: np.ndarray) -> int:
    """Number of tied pairs in an already sorted array."""
    total = 0
    run = 1
    for k in range(1, len(sorted_vals)):
        if sorted_vals[k] == sorted_vals[k - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    return total + run * (run - 1) // 2


def _merge_count_swaps(a: list) -> int:
    """Bottom-up merge sort of ``a`` in place; returns the inversion count."""
    n = len(a)
    swaps = 0
    width = 1
    buf = a[:]
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[j] < a[i]:
                    buf[k] = a[j]
                    swaps += mid - i
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            buf[k:hi] = a[i:mid] + a[j:hi]
        a[:] = buf
        width *= 2
    return swaps


def kendall_counts(xs: Sequence[float], ys: Sequence[float]) -> tuple[int, int, int, int, int]:
    """Pair counts (concordant, discordant, x-ties, y-ties, joint ties) in O(n log n).

    x-ties and y-ties include the pairs tied in both.
    """
    n = len(xs)
    order = sorted(range(n), key=lambda k: (xs[k], ys[k]))
    x_sorted = np.asarray([xs[k] for k in order])
    y_by_x = [ys[k] for k in order]

    n1 = _count_tie_pairs(x_sorted)
    n3 = 0
    run = 1
    for k in range(1, n):
        if x_sorted[k] == x_sorted[k - 1] and y_by_x[k] == y_by_x[k - 1]:
            run += 1
        else:
            n3 += run * (run - 1) // 2
            run = 1
    n3 += run * (run - 1) // 2

    # pairs strictly inverted in y once sorted by (x, y); x-tied pairs are
    # already y-ordered so they contribute no inversions
    y_work = list(y_by_x)
    discordant = _merge_count_swaps(y_work)
    n2 = _count_tie_pairs(np.asarray(y_work))

    n0 = n * (n - 1) // 2
    concordant = n0 - n1 - n2 + n3 - discordant
    return concordant, discordant, n1, n2, n3


def kendall(xs, ys=None) -> float:
    """Kendall tau-b."""
    p = _as_series(xs, ys)
    n = len(p.xs)
    c, d, n1, n2, _ = kendall_counts(p.xs, p.ys)
    n0 = n * (n - 1) // 2
    denom = (n0 - n1) * (n0 - n2)
    if denom == 0:
        raise UndefinedCorrelation("a series is entirely tied")
    tau = (c - d) / math.sqrt(denom)
    return max(-1.0, min(1.0, tau))


@dataclass
class CorrelationSummary:
    """The three correlations of one metric column against one reference column.

    A statistic that is undefined is stored as ``None`` and named in ``flags``.
    """

    n: int
    spearman: float | None = None
    kendall: float | None = None
    pearson: float | None = None
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "spearman": self.spearman,
            "kendall": self.kendall,
            "pearson": self.pearson,
            "flags": list(self.flags),
        }


def correlate(xs: Sequence[float], ys: Sequence[float]) -> CorrelationSummary:
    p = PairedSeries.of(xs, ys)
    out = CorrelationSummary(n=len(p.xs))
    for name, fn in (("spearman", spearman), ("kendall", kendall), ("pearson", pearson)):
        try:
            setattr(out, name, fn(p))
        except UndefinedCorrelation:
            out.flags.append(f"{name}:undefined")
    return out
