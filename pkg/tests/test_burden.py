import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import brute_windows, enumerate_posteriors

from eacause.burden import (E_MAX_EDGES, LEVELS, ArtifactMask, bin_burden, bin_index,
                            burden_summary, classify_treatment, detect_artifacts,
                            ea_fraction_series, fit_transition_matrix, mean_doses,
                            smooth_labels_hmm, step_fractions, window_fractions_from_counts)
from eacause.pkpd import DoseRecord


def test_hmm_matches_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = rng.uniform(0.01, 0.99, 8)
        stay = rng.uniform(0.5, 0.99, 2)
        a = np.array([[stay[0], 1 - stay[0]], [1 - stay[1], stay[1]]])
        _, post = smooth_labels_hmm(p, a)
        np.testing.assert_allclose(post, enumerate_posteriors(p, a), atol=1e-10, rtol=0)


def test_hmm_identity_transition_keeps_first_state():
    p = np.array([0.9, 0.2, 0.3, 0.4])
    labels, post = smooth_labels_hmm(p, np.eye(2))
    # with no switching, every segment shares the state favoured by the product
    assert len(set(labels)) == 1


def test_hmm_rejects_bad_transition():
    with pytest.raises(ValueError):
        smooth_labels_hmm([0.5, 0.5], [[0.5, 0.4], [0.5, 0.5]])
    with pytest.raises(ValueError):
        smooth_labels_hmm([0.5, 0.5], [[0.0, 0.0], [0.5, 0.5]])


def test_transition_fit_counts_bigrams():
    a = fit_transition_matrix([[0, 0, 1, 1, 0]])
    # bigrams: 00, 01, 11, 10 each once, plus one pseudo-count per cell
    np.testing.assert_allclose(a, [[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(ValueError):
        fit_transition_matrix([[1]])


def test_windows_match_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(10):
        labels = (rng.random(43200) < rng.uniform(0.0, 0.6)).astype(int)
        valid = rng.random(43200) > 0.05
        wf = ea_fraction_series(labels, ~valid)
        np.testing.assert_array_equal(wf.fraction, brute_windows(labels, valid, 300, 36))
        assert wf.fraction.size == 109


def test_all_zero_and_all_one():
    wf = ea_fraction_series(np.zeros(43200, dtype=int))
    assert burden_summary(wf) == (0.0, 0.0)
    wf = ea_fraction_series(np.ones(43200, dtype=int))
    assert burden_summary(wf) == (1.0, 1.0)


def test_short_recording_single_window():
    labels = np.r_[np.ones(1800), np.zeros(1800)].astype(int)  # 2 h
    wf = ea_fraction_series(labels)
    np.testing.assert_allclose(wf.fraction, [0.5])
    with pytest.raises(ValueError):
        ea_fraction_series(labels[:1000])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 300), min_size=36, max_size=144))
def test_mean_never_exceeds_max(counts):
    n_ea = np.array(counts, dtype=float)
    wf = window_fractions_from_counts(n_ea, np.full(n_ea.size, 300.0), 36, 1 / 6)
    e_max, e_mean = burden_summary(wf)
    assert 0.0 <= e_mean <= e_max <= 1.0


def test_step_fractions_are_counts():
    labels = np.r_[np.ones(300), np.zeros(300)].astype(int)
    ea, nv = step_fractions(labels)
    np.testing.assert_array_equal(ea, [300, 0])
    np.testing.assert_array_equal(nv, [300, 300])


@pytest.mark.parametrize("x, level", [(0.0, 0), (0.2499, 0), (0.25, 1), (0.5, 2), (0.75, 3),
                                      (1.0, 3)])
def test_bins_left_closed(x, level):
    assert bin_index(x, E_MAX_EDGES) == level


def test_bin_labels():
    assert bin_burden(0.8, 0.01) == ("very severe", "mild")
    assert LEVELS[0] == "mild"


def test_artifact_detection_flags_outliers():
    power = np.r_[np.ones(50), [100.0], np.ones(49)]
    slope = np.zeros(100)
    mask = detect_artifacts(power, slope)
    assert mask.flags.sum() == 1 and mask.flags[50]
    assert not mask.exclude
    assert mask.segment_mask(600)[250:255].all()


def test_artifact_long_run_excludes():
    power = np.r_[np.ones(60), np.full(40, 1e6)]
    mask = ArtifactMask(power > 10, 0.4, True)
    assert mask.exclude


def test_treatment_rule():
    doses = [DoseRecord("levetiracetam", 0.0, 60.0)]
    md = mean_doses(doses, 24.0)
    assert md["levetiracetam"] == pytest.approx(2.5)
    assert classify_treatment(md, {"levetiracetam": 25.0})
    assert not classify_treatment(md, {"levetiracetam": 25.01})
    assert not classify_treatment({}, {})
    with pytest.raises(KeyError):
        classify_treatment({"midazolam": 1.0}, {})


def test_infusion_counted_within_recording():
    md = mean_doses([DoseRecord("propofol", 22.0, 12.0, 4.0)], 24.0)
    assert md["propofol"] == pytest.approx(6.0 / 24.0)
