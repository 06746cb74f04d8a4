"""Rank statistics for condition contrasts: Mann-Whitney U and BH-FDR.

Small samples (n1 + n2 <= 12) get an exact two-sided p by enumerating
every assignment of the pooled values; larger samples use the normal
approximation with continuity and tie corrections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

EXACT_LIMIT = 12


@dataclass(frozen=True)
class StatTestResult:
    u: float
    p_value: float
    rank_biserial: float
    n1: int
    n2: int

    def __post_init__(self):
        if not 0.0 <= self.u <= self.n1 * self.n2 + 1e-9:
            raise ValueError(f"U={self.u} outside [0, {self.n1 * self.n2}]")
        if abs(self.rank_biserial) > 1.0 + 1e-9:
            raise ValueError("rank-biserial correlation outside [-1, 1]")


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _u_statistic(pooled: np.ndarray, x_index: np.ndarray, n1: int) -> float:
    ranks = _midranks(pooled)
    r1 = float(np.sum(ranks[x_index]))
    return r1 - n1 * (n1 + 1) / 2.0


def mann_whitney_u(x, y) -> StatTestResult:
    """Two-sided Mann-Whitney U test with tie handling.

    U counts (with half-credit ties) the pairs where x exceeds y; the
    rank-biserial effect size is r = 1 - 2U/(n1 n2).
    """
    x = np.asarray(list(x), dtype=np.float64)
    y = np.asarray(list(y), dtype=np.float64)
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([x, y])
    u = _u_statistic(pooled, np.arange(n1), n1)
    mu = n1 * n2 / 2.0
    if n1 + n2 <= EXACT_LIMIT:
        observed = abs(u - mu)
        extreme = 0
        total = 0
        for combo in combinations(range(n1 + n2), n1):
            u_perm = _u_statistic(pooled, np.array(combo), n1)
            if abs(u_perm - mu) >= observed - 1e-12:
                extreme += 1
            total += 1
        p = extreme / total
    else:
        n = n1 + n2
        _, tie_counts = np.unique(pooled, return_counts=True)
        tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
        sigma_sq = n1 * n2 / 12.0 * ((n + 1) - tie_term)
        if sigma_sq <= 0:
            p = 1.0
        else:
            z = (abs(u - mu) - 0.5) / math.sqrt(sigma_sq)
            z = max(z, 0.0)
            p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    r = 1.0 - 2.0 * u / (n1 * n2)
    return StatTestResult(u=u, p_value=p, rank_biserial=r, n1=n1, n2=n2)


def fdr_adjust(p_values) -> list:
    """Benjamini-Hochberg step-up adjusted p-values, order-preserving."""
    p = np.asarray(list(p_values), dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    if m == 0:
        return []
    order = np.argsort(p, kind="mergesort")
    adjusted = np.empty(m)
    running = 1.0
    for rank_from_top in range(m - 1, -1, -1):
        idx = order[rank_from_top]
        running = min(running, p[idx] * m / (rank_from_top + 1))
        adjusted[idx] = running
    return adjusted.tolist()
