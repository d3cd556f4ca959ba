"""Robustness checks: selection-bias debiasing, bin-edge sweeps, finer bins and a rank test."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .burden import bin_index
from .matching import (ApoResult, MatchingSettings, MatchSpace, Metric, arm_code,
                       fit_replicates, replicate_apo)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensitivityConfig:
    psi: float = 0.0
    psi_grid: tuple[float, ...] = (-1.0, -0.5, 0.0, 0.5, 1.0)
    rho1_grid: tuple[float, ...] = (0.1, 0.25, 0.4)
    rho2_grid: tuple[float, ...] = (0.6, 0.75, 0.9)

    def __post_init__(self):
        if not all(0 < r < 0.5 for r in self.rho1_grid):
            raise ValueError("rho1 values must lie in (0, 0.5)")
        if not all(0.5 < r < 1 for r in self.rho2_grid):
            raise ValueError("rho2 values must lie in (0.5, 1)")
        if not all(math.isfinite(p) for p in (self.psi, *self.psi_grid)):
            raise ValueError("psi values must be finite")


def selection_bias(e: np.ndarray, psi: float, double_log: bool = False) -> np.ndarray:
    """``q(e) = psi * ln(1 + e)``; ``double_log`` gives ``psi * ln(ln(1 + e))`` (e > 0 only)."""
    e = np.asarray(e, dtype=float)
    if not double_log:
        return psi * np.log1p(e)
    if np.any(e <= 0):
        raise ValueError("the double-log variant is only defined for e > 0")
    return psi * np.log(np.log1p(e))


def debias_outcomes(y: np.ndarray, e_max: np.ndarray, propensity: np.ndarray, psi: float,
                    double_log: bool = False) -> np.ndarray:
    """``Y - q(E_max) * (1 - P(own E_max bin | X))``.

    ``propensity`` is each unit's probability of the bin it is observed in.
    ``psi = 0`` returns the outcomes unchanged.
    """
    y = np.asarray(y, dtype=float)
    p = np.asarray(propensity, dtype=float)
    if not math.isfinite(psi):
        raise ValueError("psi must be finite")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("propensities must lie in [0, 1]")
    if psi == 0:
        return y.copy()
    return y - selection_bias(e_max, psi, double_log) * (1.0 - p)


def psi_sweep(reps, y, e_max, own_bin_prob, psi_grid, n_arms, settings: MatchingSettings,
              d_prune: float, n_boot: int = 0, seed: int = 0, workers: int = 1,
              double_log: bool = False) -> dict[float, ApoResult]:
    """Re-estimate APOs on debiased outcomes for each psi.

    Matched groups do not depend on outcomes, so the replicates (splits and
    learnt metrics) of the base run are reused and only the averaged
    outcomes change.
    """
    out = {}
    for psi in psi_grid:
        yd = debias_outcomes(y, e_max, own_bin_prob, psi, double_log)
        out[float(psi)] = replicate_apo(reps, yd, n_arms, settings, d_prune, n_boot=n_boot,
                                        seed=seed, workers=workers)
    return out


def quantization_sweep(space: MatchSpace, y, e_max, treated, settings: MatchingSettings,
                       seed: int, rho1_grid: Sequence[float], rho2_grid: Sequence[float],
                       base_metrics: Sequence[Metric] | None = None, workers: int = 1):
    """APO surface over E_max bin edges ``(rho1, 0.5, rho2)``.

    Each grid point re-runs matching with the redefined arms under the run
    seed, so the point (0.25, 0.75) reproduces the base analysis. Passing
    ``base_metrics`` keeps the learnt metrics fixed instead of relearning.
    Returns ``{(rho1, rho2): ApoResult or None}``; None marks a grid point
    where an untreated arm is empty.
    """
    out = {}
    d_prune = float(space.p) if settings.d_prune is None else settings.d_prune
    for r1, r2 in itertools.product(rho1_grid, rho2_grid):
        if not (0 < r1 < 0.5 < r2 < 1):
            raise ValueError(f"grid point ({r1}, {r2}) out of bounds")
        levels = bin_index(e_max, (r1, 0.5, r2))
        arms = arm_code(levels, treated)
        if any(np.sum(arms == a) == 0 for a in range(4)):
            out[(r1, r2)] = None
            continue
        reps = fit_replicates(space, y, arms, 8, settings, seed, workers, metric=base_metrics)
        out[(r1, r2)] = replicate_apo(reps, np.asarray(y, dtype=float), 8, settings, d_prune)
    return out


def merge_sparse_bins(edges: Sequence[float], counts: Sequence[int],
                      min_count: int) -> tuple[list[float], list[tuple[int, ...]]]:
    """Drop edges until every bin holds ``min_count`` units.

    The smallest under-populated bin is merged with its smaller neighbour,
    repeatedly. Returns the surviving edges and, per merged bin, the
    original bin indices it covers.
    """
    edges = list(edges)
    groups = [(i,) for i in range(len(edges) + 1)]
    counts = list(counts)
    while len(counts) > 1 and min(counts) < min_count:
        i = int(np.argmin(counts))
        if i == 0:
            j = 1
        elif i == len(counts) - 1:
            j = i - 1
        else:
            j = i - 1 if counts[i - 1] <= counts[i + 1] else i + 1
        lo, hi = min(i, j), max(i, j)
        counts[lo:hi + 1] = [counts[lo] + counts[hi]]
        groups[lo:hi + 1] = [groups[lo] + groups[hi]]
        del edges[lo]
    return edges, groups


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided Mann-Whitney U test of ``a`` against ``b``.

    ``U`` counts pairs with ``a > b`` (ties count one half). The p-value is
    exact (permutation distribution of the midrank sum, ties included) when
    the smaller sample has at most 8 values, otherwise a normal
    approximation with continuity and tie corrections.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    ranks = stats.rankdata(np.concatenate([a, b]))
    u = float(ranks[:n].sum() - n * (n + 1) / 2.0)
    if min(n, m) <= 8:
        return u, _exact_p(ranks, n, u)
    big_n = n + m
    _, ties = np.unique(ranks, return_counts=True)
    var = n * m / 12.0 * ((big_n + 1) - np.sum(ties ** 3 - ties) / (big_n * (big_n - 1)))
    if var <= 0:
        return u, 1.0
    z = (abs(u - n * m / 2.0) - 0.5) / math.sqrt(var)
    return u, float(min(1.0, 2.0 * stats.norm.sf(max(z, 0.0))))


def _exact_p(ranks: np.ndarray, n: int, u_obs: float) -> float:
    """P(|U - nm/2| >= |u_obs - nm/2|) over all equally likely splits of the ranks."""
    big_n = ranks.size
    m = big_n - n
    k = min(n, m)
    scores = np.rint(2 * ranks).astype(np.int64)  # midranks are multiples of 1/2
    top = int(np.sort(scores)[-k:].sum())
    # ways[j, s]: number of j-subsets of the items seen so far with doubled rank sum s
    ways = np.zeros((k + 1, top + 1))
    ways[0, 0] = 1.0
    for sc in scores:
        for j in range(k, 0, -1):
            ways[j, sc:] += ways[j - 1, :top + 1 - sc]
    dist = ways[k]
    total = dist.sum()
    sums = np.arange(top + 1)
    # the subset drawn is the smaller sample; express U in terms of sample a
    base = k * (k + 1)  # doubled minimal rank sum
    u_small = (sums - base) / 2.0
    u_a = u_small if k == n else n * m - u_small
    center = n * m / 2.0
    extreme = np.abs(u_a - center) >= abs(u_obs - center) - 1e-9
    return float(min(1.0, dist[extreme & (dist > 0)].sum() / total))
