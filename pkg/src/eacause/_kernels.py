"""Compiled inner loops for nearest-neighbour matching.

numba is used when available; without it the same code runs as plain
Python (correct, but slow for bootstrap-sized workloads).
"""
import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


@njit(cache=True)
def knn_loss(dist, col, delta, ys, mstart, dstart, k, nbr_in, nbr_out, warm):
    """Sum of squared errors of the within-arm k-NN mean, and the unit count.

    Arm ``b`` holds units ``mstart[b]:mstart[b+1]`` of ``ys`` (outcomes laid
    out arm by arm) and a row-major n_b x n_b block of squared distances
    starting at ``dstart[b]``. The distances used are ``dist + delta * col``,
    which lets a coordinate search change one weight without recomputing
    everything. Neighbours are the k smallest by (distance, index), so equal
    distances keep the earlier unit; they are written to ``nbr_out`` as
    within-arm indices.

    With ``warm`` set, ``nbr_in`` holds a previous neighbour set per unit.
    Its largest (distance, index) under the new distances bounds the new
    k-th neighbour, so only units at or below it enter the selection, and
    when exactly k do, the set is unchanged and needs no sorting. The
    neighbour set is the same as a full scan gives.
    """
    n_arms = mstart.size - 1
    sse = 0.0
    count = 0
    best_d = np.empty(k)
    best_j = np.empty(k, dtype=np.int64)
    max_n = 0
    for b in range(n_arms):
        max_n = max(max_n, mstart[b + 1] - mstart[b])
    cand_d = np.empty(max_n)
    cand_j = np.empty(max_n, dtype=np.int64)
    for b in range(n_arms):
        lo = mstart[b]
        n = mstart[b + 1] - lo
        if n < k + 1:
            continue
        off = dstart[b]
        for i in range(n):
            row = off + i * n
            g = lo + i
            cap_d = np.inf
            cap_j = n
            if warm:
                cap_d = -np.inf
                for t in range(k):
                    j = nbr_in[g, t]
                    d = dist[row + j] + delta * col[row + j]
                    if d > cap_d or (d == cap_d and j > cap_j):
                        cap_d = d
                        cap_j = j
            m = 0
            for j in range(n):
                d = dist[row + j] + delta * col[row + j]
                # branch-free compaction: always write, advance only on a keep
                cand_d[m] = d
                cand_j[m] = j
                m += ((d < cap_d) | ((d == cap_d) & (j <= cap_j))) & (j != i)
            pred = 0.0
            if m == k:
                # the bound admitted exactly the previous set
                for t in range(k):
                    pred += ys[lo + cand_j[t]]
                    nbr_out[g, t] = cand_j[t]
            else:
                filled = 0
                thr = np.inf
                for c in range(m):
                    d = cand_d[c]
                    if filled < k:
                        pos = filled
                        filled += 1
                    elif d < thr:
                        pos = k - 1
                    else:
                        continue
                    while pos > 0 and best_d[pos - 1] > d:
                        best_d[pos] = best_d[pos - 1]
                        best_j[pos] = best_j[pos - 1]
                        pos -= 1
                    best_d[pos] = d
                    best_j[pos] = cand_j[c]
                    if filled == k:
                        thr = best_d[k - 1]
                for t in range(k):
                    pred += ys[lo + best_j[t]]
                    nbr_out[g, t] = best_j[t]
            r = ys[g] - pred / k
            sse += r * r
            count += 1
    return sse, count


@njit(cache=True)
def group_sums(order, dist, arm_starts, y, mult, strata, k, d_prune, min_size, num, den, pruned):
    """Accumulate CAPO sums for one estimation split.

    ``order[q]`` holds the estimation units sorted by distance from query
    ``q`` (ties by index), grouped by arm; ``dist`` the matching distances.
    ``mult`` gives each unit's multiplicity (all ones for the point
    estimate, bootstrap counts otherwise). Within each arm the ``k``
    nearest units are taken, plus every unit tied with the k-th distance;
    the query itself never matches itself. Groups whose diameter exceeds
    ``d_prune`` or with fewer than ``min_size`` members are dropped.

    Adds into ``num[g, a]`` / ``den[g, a]`` for every stratum ``g`` the query
    belongs to and returns nothing; ``pruned[0]`` counts dropped groups.
    """
    m = order.shape[0]
    n_arms = arm_starts.size - 1
    n_strata = strata.shape[1]
    capo = np.empty(n_arms)
    has = np.zeros(n_arms, dtype=np.bool_)
    for q in range(m):
        cq = mult[q]
        if cq == 0:
            continue
        diam = 0.0
        size = 0
        for a in range(n_arms):
            taken = 0
            s = 0.0
            bound = np.inf
            for pos in range(arm_starts[a], arm_starts[a + 1]):
                j = order[q, pos]
                if j == q:
                    continue
                cj = mult[j]
                if cj == 0:
                    continue
                d = dist[q, pos]
                if taken >= k and d > bound:
                    break
                taken += cj
                s += cj * y[j]
                if d > diam:
                    diam = d
                if taken >= k and bound == np.inf:
                    bound = d
            size += taken
            if taken > 0:
                capo[a] = s / taken
                has[a] = True
            else:
                has[a] = False
        if diam > d_prune or size < min_size:
            pruned[0] += cq
            continue
        for g in range(n_strata):
            if not strata[q, g]:
                continue
            for a in range(n_arms):
                if has[a]:
                    num[g, a] += cq * capo[a]
                    den[g, a] += cq


@njit(cache=True)
def boot_apo(orders, dists, starts, est, y, mults, strata, k, d_prune, min_size, out):
    """Replicate-averaged APO for a batch of bootstrap multiplicities.

    ``orders``, ``dists``, ``starts`` and ``est`` stack the replicates'
    matching tables and estimation indices; ``mults[b]`` is draw ``b``'s
    multiplicity per patient. Each replicate's APO is ``num / den`` (nan
    where ``den == 0``) and ``out[b]`` is their mean over the replicates
    where it is defined, as in the point estimate.
    """
    n_rep, m = est.shape
    n_strata = strata.shape[1]
    n_arms = starts.shape[1] - 1
    num = np.empty((n_strata, n_arms))
    den = np.empty((n_strata, n_arms))
    total = np.empty((n_strata, n_arms))
    cnt = np.empty((n_strata, n_arms), dtype=np.int64)
    pruned = np.zeros(1, dtype=np.int64)
    y_r = np.empty(m)
    mult_r = np.empty(m, dtype=mults.dtype)
    strata_r = np.empty((m, n_strata), dtype=np.bool_)
    for b in range(mults.shape[0]):
        total[:] = 0.0
        cnt[:] = 0
        for r in range(n_rep):
            for i in range(m):
                u = est[r, i]
                y_r[i] = y[u]
                mult_r[i] = mults[b, u]
                strata_r[i] = strata[u]
            num[:] = 0.0
            den[:] = 0.0
            group_sums(orders[r], dists[r], starts[r], y_r, mult_r, strata_r, k, d_prune,
                       min_size, num, den, pruned)
            for g in range(n_strata):
                for a in range(n_arms):
                    if den[g, a] > 0:
                        total[g, a] += num[g, a] / den[g, a]
                        cnt[g, a] += 1
        for g in range(n_strata):
            for a in range(n_arms):
                out[b, g, a] = total[g, a] / cnt[g, a] if cnt[g, a] > 0 else np.nan
