"""Wilcoxon signed-rank, Mann-Whitney U and Bonferroni correction.

Exact p-values come from the full permutation distribution of the statistic
(counted by dynamic programming over integer ranks); larger or tied samples
fall back to the tie-corrected normal approximation with continuity
correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

ALTERNATIVES = ("two-sided", "greater", "less")
WILCOXON_EXACT_MAX_N = 25
MANNWHITNEY_EXACT_MAX_N = 14


@dataclass
class TestResult:
    statistic: float
    pvalue: float
    method: str  # "exact" or "normal"
    n: int


def rankdata(values: Sequence[float]) -> np.ndarray:
    """Ranks starting at 1; ties get the mean of their ranks."""
    a = np.asarray(values, dtype=float)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    sa = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    return ranks


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2))


def _check_alt(alternative: str) -> None:
    if alternative not in ALTERNATIVES:
        raise ValueError(f"alternative must be one of {ALTERNATIVES}")


def _clip(p: float) -> float:
    return min(1.0, max(0.0, p))


def _normal_p(stat: float, mean: float, sd: float, alternative: str) -> float:
    if sd == 0:
        return 1.0
    if alternative == "greater":
        return _clip(_norm_sf((stat - mean - 0.5) / sd))
    if alternative == "less":
        return _clip(_norm_sf((mean - stat - 0.5) / sd))
    z = (abs(stat - mean) - 0.5) / sd
    return _clip(2 * _norm_sf(max(z, 0.0)))


def _tail_p(counts: np.ndarray, stat: int, alternative: str) -> float:
    """p-value from the exact null distribution ``counts[k]`` = #arrangements with statistic k."""
    total = counts.sum()
    upper = counts[stat:].sum() / total
    lower = counts[: stat + 1].sum() / total
    if alternative == "greater":
        return _clip(upper)
    if alternative == "less":
        return _clip(lower)
    return _clip(2 * min(upper, lower))


def signed_rank_distribution(n: int) -> np.ndarray:
    """Number of sign assignments giving each W+ in 0..n(n+1)/2."""
    top = n * (n + 1) // 2
    counts = np.zeros(top + 1, dtype=object)
    counts[0] = 1
    for r in range(1, n + 1):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: top + 1 - r]
        counts = counts + shifted
    return counts.astype(float)


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float] = None, alternative: str = "two-sided") -> TestResult:
    """Paired test on ``a - b`` (or on ``a`` alone). Statistic is W+, the sum of
    ranks of positive differences; zero differences are dropped."""
    _check_alt(alternative)
    d = np.asarray(a, dtype=float) - (0.0 if b is None else np.asarray(b, dtype=float))
    if np.isnan(d).any():
        raise ValueError("NaN in paired sample")
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    tied = len(np.unique(np.abs(d))) < n
    if n <= WILCOXON_EXACT_MAX_N and not tied:
        p = _tail_p(signed_rank_distribution(n), int(round(w_plus)), alternative)
        return TestResult(w_plus, p, "exact", n)
    mean = n * (n + 1) / 4.0
    _, t = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (t**3 - t).sum() / 48.0
    return TestResult(w_plus, _normal_p(w_plus, mean, math.sqrt(max(var, 0.0)), alternative), "normal", n)


def mann_whitney_distribution(n: int, m: int) -> np.ndarray:
    """Number of arrangements giving each U in 0..n*m (U counts pairs x > y)."""
    # f[i][j] = distribution for sizes (i, j); recurrence on the largest element
    prev = [np.ones(1, dtype=object) for _ in range(m + 1)]
    for i in range(1, n + 1):
        cur = [np.ones(1, dtype=object)]
        for j in range(1, m + 1):
            size = i * j + 1
            acc = np.zeros(size, dtype=object)
            # largest element from x: contributes j pairs
            px = prev[j]
            acc[j : j + len(px)] += px
            # largest element from y
            py = cur[j - 1]
            acc[: len(py)] += py
            cur.append(acc)
        prev = cur
    return prev[m].astype(float)


def mann_whitney_u(x: Sequence[float], y: Sequence[float], alternative: str = "two-sided") -> TestResult:
    """Unpaired rank-sum test. Statistic is U for ``x`` (pairs with x > y, ties 1/2);
    ``greater`` means x tends to be larger."""
    _check_alt(alternative)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValueError("NaN in sample")
    allv = np.concatenate([x, y])
    ranks = rankdata(allv)
    u = float(ranks[:n].sum() - n * (n + 1) / 2.0)
    tied = len(np.unique(allv)) < n + m
    if n + m <= MANNWHITNEY_EXACT_MAX_N and not tied:
        p = _tail_p(mann_whitney_distribution(n, m), int(round(u)), alternative)
        return TestResult(u, p, "exact", n + m)
    N = n + m
    _, t = np.unique(allv, return_counts=True)
    var = n * m / 12.0 * ((N + 1) - (t**3 - t).sum() / (N * (N - 1))) if N > 1 else 0.0
    return TestResult(u, _normal_p(u, n * m / 2.0, math.sqrt(max(var, 0.0)), alternative), "normal", N)


def bonferroni(p_values: Sequence[float], m: int = None) -> List[float]:
    ps = [float(p) for p in p_values]
    if any(not 0.0 <= p <= 1.0 for p in ps):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(ps) if m is None else int(m)
    if m < 1:
        raise ValueError("m must be >= 1")
    return [min(1.0, p * m) for p in ps]
