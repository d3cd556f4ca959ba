"""Learned-metric matching and potential-outcome estimation over exposure arms.

Units are described by a standardized match space (pre-admission covariates
plus per-drug PD parameters). A diagonal weighted Euclidean metric is learnt
on a training split so that within-arm nearest neighbours predict outcomes
well; on the held-out estimation split every unit gets a matched group with
its nearest neighbours from each arm. Averaging matched outcomes arm by arm
gives conditional average potential outcomes (CAPO); averaging those over
units gives the arm's average potential outcome (APO).

Arms are coded ``level + n_levels * treated``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .cohort import standardize_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatchSpace:
    x: np.ndarray  # standardized, rows aligned with ids
    names: tuple[str, ...]
    ids: tuple[str, ...]
    zero_variance: np.ndarray

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_raw(cls, raw: np.ndarray, names: Sequence[str], ids: Sequence[str]) -> "MatchSpace":
        z, stats = standardize_matrix(np.asarray(raw, dtype=float))
        if not np.all(np.isfinite(z)):
            raise ValueError("match space has non-finite entries")
        return cls(z, tuple(names), tuple(str(i) for i in ids), stats.zero_variance)


@dataclass(frozen=True)
class Metric:
    weights: np.ndarray
    names: tuple[str, ...]
    objective: float

    @property
    def ranking(self) -> list[tuple[str, float, int]]:
        """(name, weight, rank) with rank 1 the most important."""
        order = sorted(range(len(self.weights)), key=lambda i: (-self.weights[i], i))
        return [(self.names[i], float(self.weights[i]), r + 1) for r, i in enumerate(order)]

    def distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.sqrt(np.sum(self.weights * (np.asarray(a) - np.asarray(b)) ** 2, axis=-1))


def arm_code(level, treated, n_levels: int = 4):
    return np.asarray(level) + n_levels * np.asarray(treated, dtype=int)


def arm_label(code: int, level_names: Sequence[str]) -> tuple[str, int]:
    n = len(level_names)
    return level_names[code % n], code // n


class _KnnObjective:
    """Within-arm k-NN prediction error with cached squared distances.

    Compass search changes one log-weight at a time, so candidate distances
    are the incumbent's plus a multiple of one squared-difference column.
    """

    def __init__(self, x, y, arms, n_arms, k):
        self.k = k
        self.y = np.ascontiguousarray(y, dtype=float)
        groups = [np.flatnonzero(arms == a) for a in range(n_arms)]
        groups = [g for g in groups if g.size >= k + 1]
        self.members = np.concatenate(groups).astype(np.int64) if groups \
            else np.zeros(0, dtype=np.int64)
        self.ys = self.y[self.members]
        self.mstart = np.cumsum([0] + [g.size for g in groups]).astype(np.int64)
        self.dstart = np.cumsum([0] + [g.size ** 2 for g in groups]).astype(np.int64)
        p = x.shape[1]
        self.diff2 = np.empty((p, int(self.dstart[-1])))
        for g, off in zip(groups, self.dstart[:-1]):
            diff = x[g][:, None, :] - x[g][None, :, :]
            self.diff2[:, off:off + g.size ** 2] = (diff * diff).reshape(-1, p).T
        self.n_units = int(self.members.size)
        self._zero = np.zeros(self.diff2.shape[1])
        self.w = None
        self.dist = None
        self.nbr = None
        self._scratch = np.empty((self.n_units, k), dtype=np.int64)
        self._last_w = None

    def _run(self, dist, col, delta, out, warm=True) -> float:
        sse, cnt = _kernels.knn_loss(dist, col, delta, self.ys, self.mstart, self.dstart, self.k,
                                     self.nbr if warm else out, out, warm)
        return sse / cnt

    def set_weights(self, w):
        """Make ``w`` the incumbent; its neighbour sets warm-start later evaluations."""
        if self._last_w is w or (self._last_w is not None and np.array_equal(w, self._last_w)):
            # neighbour sets of the candidate just scored
            self.nbr, self._scratch = self._scratch, self.nbr
        self.w = w.copy()
        self.dist = w @ self.diff2
        self._last_w = None

    def loss(self, w) -> float:
        changed = np.flatnonzero(w != self.w)
        if changed.size == 1:
            d = changed[0]
            col, delta, dist = self.diff2[d], w[d] - self.w[d], self.dist
        else:
            col, delta, dist = self._zero, 0.0, w @ self.diff2
        if self.nbr is None:
            self.nbr = np.empty_like(self._scratch)
            return self._run(dist, col, delta, self.nbr, warm=False)
        self._last_w = w.copy()
        return self._run(dist, col, delta, self._scratch)

    def loss_move(self, w, d: int) -> float:
        """:meth:`loss` for a ``w`` that differs from the incumbent in coordinate ``d`` only."""
        self._last_w = w
        return self._run(self.dist, self.diff2[d], w[d] - self.w[d], self._scratch)


def _compass_search(obj: _KnnObjective, l1: float, theta: np.ndarray, free: np.ndarray,
                    lo: float, hi: float, step: float, min_step: float, max_evals: int):
    def weights(th):
        return np.where(free, np.exp(th), 0.0)

    w = weights(theta)
    obj.set_weights(w)
    fx = obj.loss(w) + l1 * w.sum()
    evals = 1
    while step >= min_step and evals < max_evals:
        improved = False
        for d in np.flatnonzero(free):
            for sign in (1.0, -1.0):
                cand = theta.copy()
                cand[d] = min(hi, max(lo, theta[d] + sign * step))
                if cand[d] == theta[d]:
                    continue
                wc = weights(cand)
                fc = obj.loss_move(wc, d) + l1 * wc.sum()
                evals += 1
                if fc < fx - 1e-10:
                    theta, fx = cand, fc
                    obj.set_weights(wc)
                    improved = True
                    break
                if evals >= max_evals:
                    break
            if evals >= max_evals:
                break
        if not improved:
            step /= 2.0
    return theta, fx


def learn_metric(x: np.ndarray, y: np.ndarray, arms: np.ndarray, n_arms: int, k: int = 10,
                 l1: float = 0.01, restarts: int = 8, max_evals: int = 400, seed: int = 0,
                 names: Sequence[str] | None = None,
                 zero_variance: np.ndarray | None = None) -> Metric:
    """Learn non-negative per-dimension weights for the matching distance.

    Minimizes the mean squared error of predicting each training unit's
    outcome by the mean of its ``k`` nearest same-arm neighbours, plus
    ``l1 * sum(w)``, by multi-start compass search over log-weights (the
    first start is uniform). The k-NN error does not depend on the overall
    scale of ``w``, so the L1 term shrinks weights that do not help
    prediction; the result is rescaled so the weights sum to the dimension
    ``p``.
    """
    x = np.ascontiguousarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    arms = np.asarray(arms)
    n, p = x.shape
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(p))
    free = ~np.asarray(zero_variance, dtype=bool) if zero_variance is not None \
        else np.ones(p, dtype=bool)
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < 5 * k:
        raise ValueError(f"training split has {n} units; need at least {5 * k}")
    small = [a for a in range(n_arms) if 0 < np.sum(arms == a) < k + 1]
    if small:
        log.info("arms %s have fewer than k+1=%d training units and are left out of "
                    "the metric objective", small, k + 1)
    uniform = np.where(free, 1.0, 0.0)
    uniform = uniform * p / max(uniform.sum(), 1.0)
    obj = _KnnObjective(x, y, arms, n_arms, k)
    if obj.n_units == 0 or np.ptp(y[obj.members]) == 0 or not free.any():
        # nothing to learn from
        return Metric(uniform, names, math.nan)

    best_theta, best_f = None, math.inf
    for r in range(restarts):
        theta0 = np.zeros(p)
        if r > 0:
            theta0 = np.random.default_rng([seed, r]).normal(0.0, 1.0, p)
        theta, fx = _compass_search(obj, l1, np.where(free, theta0, 0.0), free,
                                    lo=-10.0, hi=5.0, step=1.0, min_step=0.25,
                                    max_evals=max_evals)
        if fx < best_f - 1e-12:
            best_theta, best_f = theta, fx
    w = np.where(free, np.exp(best_theta), 0.0)
    w = w * p / w.sum()
    return Metric(w, names, float(best_f))


def pairwise_distance(x: np.ndarray, weights: np.ndarray, chunk: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m = x.shape[0]
    out = np.empty((m, m))
    for s in range(0, m, chunk):
        diff = x[s:s + chunk, None, :] - x[None, :, :]
        out[s:s + chunk] = np.sqrt(np.einsum("ijk,k->ij", diff * diff, weights))
    return out


@dataclass
class MatchedGroup:
    query_id: str
    query_arm: int
    member_ids: list[str]
    member_arms: list[int]
    distances: list[float]
    outcomes: dict[int, list[float]]

    @property
    def diameter(self) -> float:
        return max(self.distances, default=0.0)

    @property
    def size(self) -> int:
        return len(self.member_ids)

    def to_json(self) -> dict:
        return {"query": self.query_id, "query_arm": self.query_arm, "members": self.member_ids,
                "member_arms": self.member_arms,
                "distances": [round(d, 10) for d in self.distances],
                "diameter": round(self.diameter, 10)}


def _sorted_orders(dist: np.ndarray, arms: np.ndarray, n_arms: int):
    """Per-row unit order grouped by arm, sorted by (distance, index) within arm."""
    m = dist.shape[0]
    order = np.empty((m, m), dtype=np.int64)
    sdist = np.empty((m, m))
    starts = [0]
    for a in range(n_arms):
        cols = np.flatnonzero(arms == a)
        lo = starts[-1]
        hi = lo + cols.size
        if cols.size:
            sub = dist[:, cols]
            o = np.argsort(sub, axis=1, kind="stable")
            order[:, lo:hi] = cols[o]
            sdist[:, lo:hi] = np.take_along_axis(sub, o, axis=1)
        starts.append(hi)
    return order, sdist, np.asarray(starts, dtype=np.int64)


def match_groups(metric: Metric, x: np.ndarray, arms: np.ndarray, ids: Sequence[str],
                 y: np.ndarray, n_arms: int, k_per_arm: int = 5) -> list[MatchedGroup]:
    """Matched group of every unit: its ``k_per_arm`` nearest units from each arm.

    Units tied with the k-th distance are all included; ordering among
    equidistant units follows row order (callers sort rows by patient id).
    The query unit is never its own match.
    """
    arms = np.asarray(arms)
    y = np.asarray(y, dtype=float)
    dist = pairwise_distance(x, metric.weights)
    order, sdist, starts = _sorted_orders(dist, arms, n_arms)
    groups = []
    for q in range(len(ids)):
        mids, marms, mdist = [], [], []
        outcomes: dict[int, list[float]] = {}
        for a in range(n_arms):
            taken = 0
            bound = math.inf
            for pos in range(starts[a], starts[a + 1]):
                j = order[q, pos]
                if j == q:
                    continue
                d = sdist[q, pos]
                if taken >= k_per_arm and d > bound:
                    break
                taken += 1
                mids.append(ids[j])
                marms.append(int(a))
                mdist.append(float(d))
                outcomes.setdefault(a, []).append(float(y[j]))
                if taken >= k_per_arm and bound == math.inf:
                    bound = d
        groups.append(MatchedGroup(ids[q], int(arms[q]), mids, marms, mdist, outcomes))
    return groups


def prune_groups(groups: Sequence[MatchedGroup], d_prune: float) -> tuple[list[MatchedGroup], int]:
    """Drop groups whose diameter exceeds ``d_prune`` (a diameter equal to it is kept)."""
    if not d_prune > 0:
        raise ValueError("d_prune must be positive")
    kept = [g for g in groups if g.diameter <= d_prune]
    if groups and not kept:
        raise ValueError(f"all {len(groups)} matched groups exceed d_prune={d_prune}; "
                         "use a larger d_prune")
    return kept, len(groups) - len(kept)


def estimate_capo(group: MatchedGroup, arm: int) -> float:
    """Mean outcome of the group's members in ``arm`` (nan if it has none)."""
    vals = group.outcomes.get(arm, [])
    if not vals:
        return math.nan
    return float(sum(vals) / len(vals))


def apo_from_groups(groups: Sequence[MatchedGroup], arm: int) -> float:
    vals = [estimate_capo(g, arm) for g in groups]
    vals = [v for v in vals if not math.isnan(v)]
    if not vals:
        raise ValueError(f"arm {arm} has no matched members in any group")
    return float(np.mean(vals))


def percentile_interval(samples: np.ndarray, levels: Sequence[float] = (2.5, 97.5)) -> tuple[float, float]:
    lo, hi = np.percentile(samples, list(levels))
    return float(lo), float(hi)


def bootstrap_ci(statistic: Callable[[np.ndarray], float], n: int, n_boot: int = 1000,
                 levels: Sequence[float] = (2.5, 97.5), seed: int = 0) -> tuple[float, float]:
    """Percentile interval of ``statistic(indices)`` over resamples of ``n`` units.

    Resample ``b`` uses its own generator seeded by ``(seed, b)``. Raises if
    the statistic is undefined (nan) on more than half of the resamples.
    """
    if n_boot < 2:
        raise ValueError("n_boot must be at least 2")
    vals = np.empty(n_boot)
    for b in range(n_boot):
        idx = np.random.default_rng([seed, b]).integers(0, n, n)
        vals[b] = statistic(idx)
    ok = np.isfinite(vals)
    if ok.sum() < n_boot / 2:
        raise ValueError("statistic undefined on more than half of the bootstrap resamples")
    return percentile_interval(vals[ok], levels)


def bootstrap_counts(n: int, b: int, seed: int) -> np.ndarray:
    idx = np.random.default_rng([seed, b]).integers(0, n, n)
    return np.bincount(idx, minlength=n)


@dataclass
class MatchingSettings:
    k: int = 10
    k_per_arm: int = 5
    l1: float = 0.01
    restarts: int = 8
    max_evals: int = 400
    replicates: int = 15
    train_fraction: float = 2.0 / 3.0
    d_prune: float | None = None  # None -> dimension p
    min_group_size: int = 6
    max_group_size: int = 40
    n_boot: int = 1000
    ci_levels: tuple[float, float] = (2.5, 97.5)

    @classmethod
    def from_config(cls, section: dict) -> "MatchingSettings":
        kw = {}
        for f in ("k", "k_per_arm", "restarts", "max_evals", "replicates", "min_group_size",
                  "max_group_size"):
            if f in section:
                kw[f] = int(section[f])
        for f in ("l1", "train_fraction"):
            if f in section:
                kw[f] = float(section[f])
        if "d_prune" in section:
            d = section["d_prune"]
            kw["d_prune"] = None if d == "p" else float(d)
        return cls(**kw)


@dataclass
class Replicate:
    index: int
    train: np.ndarray
    est: np.ndarray
    metric: Metric
    order: np.ndarray = field(repr=False)
    sdist: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)


def split_indices(n: int, train_fraction: float, seed: int, replicate: int):
    """Seeded train/estimation split; rows are expected in patient-id order."""
    if train_fraction <= 0:
        return np.zeros(0, dtype=np.int64), np.arange(n)
    perm = np.random.default_rng([seed, 1000 + replicate]).permutation(n)
    n_train = int(round(n * train_fraction))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _fit_one(args):
    (r, x, y, arms, n_arms, s, seed, names, zero_var, metric) = args
    train, est = split_indices(len(y), s.train_fraction, seed, r)
    if metric is None and train.size == 0:
        w = np.where(zero_var, 0.0, 1.0)
        metric = Metric(w * len(w) / max(w.sum(), 1.0), names, math.nan)
    elif metric is None:
        metric = learn_metric(x[train], y[train], arms[train], n_arms, k=s.k, l1=s.l1,
                              restarts=s.restarts, max_evals=s.max_evals, seed=seed * 7919 + r,
                              names=names, zero_variance=zero_var)
    dist = pairwise_distance(x[est], metric.weights)
    order, sdist, starts = _sorted_orders(dist, arms[est], n_arms)
    return Replicate(r, train, est, metric, order, sdist, starts)


def fit_replicates(space: MatchSpace, y: np.ndarray, arms: np.ndarray, n_arms: int,
                   settings: MatchingSettings, seed: int, workers: int = 1,
                   metric: Metric | Sequence[Metric] | None = None) -> list[Replicate]:
    """Learn a metric on each replicate's training split and index its estimation split.

    Passing ``metric`` (one for all replicates, or one per replicate) skips
    learning. With ``train_fraction == 0`` there is nothing to learn from and
    the uniform metric is used on the whole sample.
    """
    y = np.asarray(y, dtype=float)
    arms = np.asarray(arms, dtype=np.int64)
    if isinstance(metric, Metric) or metric is None:
        metrics = [metric] * settings.replicates
    else:
        metrics = list(metric)
        if len(metrics) != settings.replicates:
            raise ValueError("need one metric per replicate")
    tasks = [(r, space.x, y, arms, n_arms, settings, seed, space.names, space.zero_variance,
              metrics[r]) for r in range(settings.replicates)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_fit_one, tasks))
    return [_fit_one(t) for t in tasks]


@dataclass(frozen=True)
class PotentialOutcomeEstimate:
    arm: int
    estimate: float
    ci_low: float
    ci_high: float
    n_contributing: int


@dataclass
class ApoResult:
    estimates: np.ndarray  # (n_strata, n_arms), nan where undefined
    boot: np.ndarray | None  # (n_boot, n_strata, n_arms)
    per_replicate: np.ndarray  # (replicates, n_strata, n_arms)
    pruned: np.ndarray  # groups pruned per replicate
    groups_total: np.ndarray


def _replicate_sums(rep: Replicate, y, mult, strata, k_per_arm, d_prune, min_size, n_arms):
    n_strata = strata.shape[1]
    num = np.zeros((n_strata, n_arms))
    den = np.zeros((n_strata, n_arms))
    pruned = np.zeros(1, dtype=np.int64)
    _kernels.group_sums(rep.order, rep.sdist, rep.starts, y[rep.est], mult[rep.est],
                        strata[rep.est], k_per_arm, d_prune, min_size, num, den, pruned)
    return num, den, int(pruned[0])


def _combine(reps, y, mult, strata, k_per_arm, d_prune, min_size, n_arms):
    per = np.full((len(reps), strata.shape[1], n_arms), np.nan)
    pruned = np.zeros(len(reps), dtype=np.int64)
    for i, rep in enumerate(reps):
        num, den, pr = _replicate_sums(rep, y, mult, strata, k_per_arm, d_prune, min_size, n_arms)
        with np.errstate(invalid="ignore", divide="ignore"):
            per[i] = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
        pruned[i] = pr
    with np.errstate(invalid="ignore"):
        defined = np.isfinite(per)
        total = np.where(defined, per, 0.0).sum(axis=0)
        cnt = defined.sum(axis=0)
        est = np.where(cnt > 0, total / np.maximum(cnt, 1), np.nan)
    return est, per, pruned


def _boot_chunk(args):
    reps, y, strata, s, d_prune, n_arms, seed, b_lo, b_hi, n = args
    mults = np.stack([bootstrap_counts(n, b, seed) for b in range(b_lo, b_hi)])
    out = np.empty((b_hi - b_lo, strata.shape[1], n_arms))
    _kernels.boot_apo(np.stack([r.order for r in reps]), np.stack([r.sdist for r in reps]),
                      np.stack([r.starts for r in reps]), np.stack([r.est for r in reps]),
                      y, mults, strata, s.k_per_arm, d_prune, s.min_group_size, out)
    return out


def replicate_apo(reps: Sequence[Replicate], y: np.ndarray, n_arms: int,
                  settings: MatchingSettings, d_prune: float, strata: np.ndarray | None = None,
                  n_boot: int = 0, seed: int = 0, workers: int = 1) -> ApoResult:
    """Replicate-averaged APO per (stratum, arm), optionally with a patient bootstrap.

    Each bootstrap resample draws patients with replacement from the whole
    cohort; every replicate then re-matches within its estimation split
    using the resampled multiplicities, with the learnt metrics held fixed.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    if strata is None:
        strata = np.ones((n, 1), dtype=np.bool_)
    strata = np.ascontiguousarray(strata, dtype=np.bool_)
    ones = np.ones(n, dtype=np.int64)
    est, per, pruned = _combine(reps, y, ones, strata, settings.k_per_arm, d_prune,
                                settings.min_group_size, n_arms)
    total = np.array([len(r.est) for r in reps])
    boot = None
    if n_boot:
        chunks = max(1, workers)
        bounds = np.linspace(0, n_boot, chunks + 1).astype(int)
        tasks = [(list(reps), y, strata, settings, d_prune, n_arms, seed, bounds[i], bounds[i + 1], n)
                 for i in range(chunks) if bounds[i + 1] > bounds[i]]
        if workers > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(_boot_chunk, tasks))
        else:
            parts = [_boot_chunk(t) for t in tasks]
        boot = np.concatenate(parts, axis=0)
    return ApoResult(est, boot, per, pruned, total)


def interval(point: float, samples: np.ndarray | None, levels=(2.5, 97.5),
             max_undefined: float = 0.5) -> tuple[float, float]:
    """Percentile interval widened if needed so it contains the point estimate."""
    if samples is None or not np.isfinite(point):
        return math.nan, math.nan
    ok = np.isfinite(samples)
    if ok.mean() < 1 - max_undefined:
        return math.nan, math.nan
    lo, hi = percentile_interval(samples[ok], levels)
    return min(lo, point), max(hi, point)


def estimate_apo(space: MatchSpace, y: np.ndarray, arms: np.ndarray, n_arms: int,
                 settings: MatchingSettings | None = None, seed: int = 0, workers: int = 1,
                 metric: Metric | None = None, n_boot: int | None = None):
    """APO for every arm with percentile bootstrap intervals.

    Returns ``(estimates, replicates, result)`` where ``estimates`` is a list
    of :class:`PotentialOutcomeEstimate` (one per arm, nan when the arm is
    never matched).
    """
    s = settings or MatchingSettings()
    d_prune = float(space.p) if s.d_prune is None else s.d_prune
    reps = fit_replicates(space, y, arms, n_arms, s, seed, workers, metric=metric)
    nb = s.n_boot if n_boot is None else n_boot
    res = replicate_apo(reps, y, n_arms, s, d_prune, n_boot=nb, seed=seed, workers=workers)
    if np.all(res.pruned == res.groups_total):
        raise ValueError(f"all matched groups exceed d_prune={d_prune}; use a larger d_prune")
    out = []
    for a in range(n_arms):
        point = float(res.estimates[0, a])
        lo, hi = interval(point, None if res.boot is None else res.boot[:, 0, a], s.ci_levels)
        out.append(PotentialOutcomeEstimate(a, point, lo, hi, int(np.sum(np.asarray(arms) == a))))
    return out, reps, res


def contrast_interval(res: ApoResult, hi_arm: int, lo_arm: int, stratum: int = 0,
                      levels=(2.5, 97.5)) -> tuple[float, float, float]:
    point = float(res.estimates[stratum, hi_arm] - res.estimates[stratum, lo_arm])
    samples = None if res.boot is None else res.boot[:, stratum, hi_arm] - res.boot[:, stratum, lo_arm]
    lo, hi = interval(point, samples, levels)
    return point, lo, hi


def subgroup_effects(reps: Sequence[Replicate], y: np.ndarray, stratifier: np.ndarray,
                     n_arms: int, settings: MatchingSettings, d_prune: float, hi_arm: int,
                     lo_arm: int, n_boot: int = 0, seed: int = 0, workers: int = 1) -> dict:
    """APO(hi_arm) - APO(lo_arm) among units with the flag present and absent.

    Matched groups are built on the whole estimation split; only the
    averaging over query units is restricted to the stratum. An empty
    stratum is reported as unavailable.
    """
    flag = np.asarray(stratifier) > 0.5
    strata = np.column_stack([np.ones_like(flag), flag, ~flag])
    res = replicate_apo(reps, y, n_arms, settings, d_prune, strata=strata, n_boot=n_boot,
                        seed=seed, workers=workers)
    out = {}
    for g, name in ((0, "overall"), (1, "present"), (2, "absent")):
        mask = strata[:, g]
        if not mask.any():
            out[name] = None
            continue
        point, lo, hi = contrast_interval(res, hi_arm, lo_arm, g, settings.ci_levels)
        out[name] = None if not np.isfinite(point) else (point, lo, hi, int(mask.sum()))
    return out
