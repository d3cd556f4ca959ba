import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import exhaustive_nearest

from eacause.matching import _KnnObjective
from eacause.matching import (MatchingSettings, MatchSpace, Metric, arm_code, bootstrap_ci,
                              estimate_apo, fit_replicates, learn_metric, match_groups,
                              pairwise_distance, prune_groups, replicate_apo, split_indices,
                              subgroup_effects)


def test_k1_matches_exhaustive_scan():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 3))
    x[:20] = np.round(x[:20])  # force some exact ties
    arms = rng.integers(0, 4, 200)
    w = np.array([0.5, 1.0, 1.5])
    ids = [f"u{i:03d}" for i in range(200)]
    groups = match_groups(Metric(w, ("a", "b", "c"), 0.0), x, arms, ids, np.zeros(200), 4, 1)
    oracle = exhaustive_nearest(x, w, arms, 4)
    for q, g in enumerate(groups):
        for a in range(4):
            got = sorted(int(m[1:]) for m, ma in zip(g.member_ids, g.member_arms) if ma == a)
            assert got == oracle[q][a]


def _brute_knn(dist, obj, k):
    """Loss and sorted neighbour sets by ranking every same-arm unit on (distance, index)."""
    sse, sets = 0.0, []
    for b in range(obj.mstart.size - 1):
        lo, n, off = obj.mstart[b], obj.mstart[b + 1] - obj.mstart[b], obj.dstart[b]
        for i in range(n):
            row = dist[off + i * n: off + (i + 1) * n]
            nb = sorted((j for j in range(n) if j != i), key=lambda j: (row[j], j))[:k]
            sse += (obj.ys[lo + i] - obj.ys[lo + np.array(nb)].mean()) ** 2
            sets.append(sorted(nb))
    return sse / len(sets), sets


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.lists(st.tuples(st.integers(0, 3), st.floats(-2, 2)),
                                           min_size=1, max_size=12))
def test_warm_started_knn_loss_equals_full_ranking(seed, moves):
    rng = np.random.default_rng(seed)
    x = np.round(rng.normal(size=(90, 4)) * 2) / 2  # coarse grid, many ties
    y = rng.integers(0, 2, 90).astype(float)
    arms = rng.integers(0, 3, 90)
    obj = _KnnObjective(x, y, arms, 3, 5)
    w = np.exp(rng.normal(size=4))
    obj.set_weights(w)
    assert obj.loss(w) == pytest.approx(_brute_knn(obj.dist, obj, 5)[0], rel=1e-12)
    for d, step in moves:
        wc = w.copy()
        wc[d] = w[d] * math.exp(step)
        got = obj.loss_move(wc, d)
        want, sets = _brute_knn(obj.dist + (wc[d] - w[d]) * obj.diff2[d], obj, 5)
        assert got == pytest.approx(want, rel=1e-12)
        assert [sorted(r) for r in obj._scratch.tolist()] == sets
        if step > 0:  # accept some moves so later ones warm-start from a new incumbent
            obj.set_weights(wc)
            w = wc


def test_pairwise_distance_is_weighted_euclidean():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(7, 2))
    w = np.array([2.0, 0.5])
    d = pairwise_distance(x, w)
    assert d[2, 5] == pytest.approx(math.sqrt(2 * (x[2, 0] - x[5, 0]) ** 2
                                              + 0.5 * (x[2, 1] - x[5, 1]) ** 2))
    np.testing.assert_allclose(d, d.T)
    assert np.all(np.diag(d) == 0)


def test_identical_covariates_give_arm_means():
    rng = np.random.default_rng(3)
    n = 90
    x = np.ones((n, 2))
    y = rng.integers(0, 2, n).astype(float)
    arms = rng.integers(0, 4, n)
    space = MatchSpace(np.zeros((n, 2)), ("a", "b"), tuple(map(str, range(n))),
                       np.array([True, True]))
    s = MatchingSettings(replicates=1, train_fraction=0.0, d_prune=math.inf, min_group_size=1)
    est, _, _ = estimate_apo(space, y, arms, 4, s, n_boot=0)
    for a in range(4):
        assert est[a].estimate == pytest.approx(y[arms == a].mean(), abs=1e-12)


def test_pruning_threshold():
    x = np.array([[0.0], [0.1], [0.2], [5.0]])
    groups = match_groups(Metric(np.ones(1), ("a",), 0.0), x, np.zeros(4, int), list("abcd"),
                          np.zeros(4), 1, k_per_arm=1)
    kept, pruned = prune_groups(groups, 1.0)
    assert pruned == 1 and kept[-1].query_id == "c"
    with pytest.raises(ValueError):
        prune_groups(groups, 1e-6)


def test_group_sums_agree_with_explicit_groups():
    rng = np.random.default_rng(5)
    n = 120
    x = rng.normal(size=(n, 3))
    y = rng.integers(0, 2, n).astype(float)
    arms = rng.integers(0, 4, n)
    w = np.array([1.0, 0.5, 1.5])
    space = MatchSpace(x, ("a", "b", "c"), tuple(f"{i:03d}" for i in range(n)), np.zeros(3, bool))
    s = MatchingSettings(replicates=1, train_fraction=0.0, k_per_arm=3, min_group_size=1)
    reps = fit_replicates(space, y, arms, 4, s, 0, metric=Metric(w, space.names, 0.0))
    res = replicate_apo(reps, y, 4, s, d_prune=3.0)
    groups = match_groups(Metric(w, space.names, 0.0), x, arms, list(space.ids), y, 4, 3)
    kept, pruned = prune_groups(groups, 3.0)
    assert pruned == res.pruned[0]
    for a in range(4):
        vals = [np.mean(g.outcomes[a]) for g in kept if a in g.outcomes]
        assert res.estimates[0, a] == pytest.approx(np.mean(vals), abs=1e-12)


def test_learn_metric_finds_relevant_dimension():
    rng = np.random.default_rng(7)
    n = 300
    x = rng.normal(size=(n, 4))
    y = (x[:, 2] + 0.3 * rng.normal(size=n) > 0).astype(float)
    arms = rng.integers(0, 2, n)
    m = learn_metric(x, y, arms, 2, k=10, restarts=2, seed=1)
    assert m.weights.sum() == pytest.approx(4.0)
    assert np.all(m.weights >= 0)
    assert int(np.argmax(m.weights)) == 2
    assert m.ranking[0][0] == "x2"


def test_learn_metric_guards():
    x = np.zeros((20, 2))
    with pytest.raises(ValueError):
        learn_metric(x, np.zeros(20), np.zeros(20, int), 1, k=10)
    # constant outcome: nothing to learn, uniform weights
    m = learn_metric(np.random.default_rng(0).normal(size=(60, 2)), np.ones(60),
                     np.zeros(60, int), 1, k=5)
    np.testing.assert_allclose(m.weights, [1.0, 1.0])


def test_zero_variance_dimension_gets_no_weight():
    rng = np.random.default_rng(2)
    raw = np.column_stack([rng.normal(size=80), np.full(80, 3.0)])
    space = MatchSpace.from_raw(raw, ("a", "b"), range(80))
    y = (raw[:, 0] > 0).astype(float)
    m = learn_metric(space.x, y, np.zeros(80, int), 1, k=5, restarts=1,
                     zero_variance=space.zero_variance)
    assert m.weights[1] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 500), st.floats(0.1, 0.9), st.integers(0, 2 ** 32), st.integers(0, 20))
def test_split_is_partition(n, frac, seed, r):
    tr, es = split_indices(n, frac, seed, r)
    assert np.array_equal(np.sort(np.r_[tr, es]), np.arange(n))
    assert tr.size == int(round(n * frac))


def test_bootstrap_ci_deterministic_and_guarded():
    y = np.random.default_rng(0).normal(size=50)
    a = bootstrap_ci(lambda idx: y[idx].mean(), 50, 200, seed=3)
    assert a == bootstrap_ci(lambda idx: y[idx].mean(), 50, 200, seed=3)
    assert a[0] < y.mean() < a[1]
    with pytest.raises(ValueError):
        bootstrap_ci(lambda idx: math.nan, 50, 20)


def _small_problem(n=150, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    arms = arm_code(rng.integers(0, 4, n), rng.integers(0, 2, n))
    y = (x[:, 0] + rng.normal(size=n) > 0).astype(float)
    space = MatchSpace.from_raw(x, ("a", "b", "c"), [f"{i:04d}" for i in range(n)])
    return space, y, arms


def test_estimates_independent_of_workers():
    space, y, arms = _small_problem()
    s = MatchingSettings(replicates=3, restarts=2, max_evals=60, k=3, n_boot=20)
    one = estimate_apo(space, y, arms, 8, s, seed=4, workers=1)[2]
    two = estimate_apo(space, y, arms, 8, s, seed=4, workers=2)[2]
    np.testing.assert_array_equal(one.estimates, two.estimates)
    np.testing.assert_array_equal(one.boot, two.boot)


def test_interval_contains_point():
    space, y, arms = _small_problem(seed=1)
    s = MatchingSettings(replicates=2, restarts=1, max_evals=40, k=3, n_boot=30)
    est, _, _ = estimate_apo(space, y, arms, 8, s, seed=0)
    for e in est:
        if np.isfinite(e.estimate):
            assert e.ci_low <= e.estimate <= e.ci_high


def test_subgroup_strata_partition():
    space, y, arms = _small_problem(seed=2)
    s = MatchingSettings(replicates=2, restarts=1, max_evals=40, k=3)
    reps = fit_replicates(space, y, arms, 8, s, 0)
    flag = (space.x[:, 1] > 0).astype(float)
    eff = subgroup_effects(reps, y, flag, 8, s, 3.0, 3, 0)
    assert eff["present"][3] + eff["absent"][3] == y.size
    none = subgroup_effects(reps, y, np.zeros(y.size), 8, s, 3.0, 3, 0)
    assert none["present"] is None
