import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import rk4_concentrations

from eacause.pkpd import (DEFAULT_DRUG_TABLE, DoseRecord, DrugPd, DrugTable, PdParams,
                          advance_concentration, fit_pd_params, hill_suppression, hill_terms,
                          population_median_ed50, simulate_concentration)


def test_bolus_closed_form():
    table = DrugTable.default()
    t = np.array([0.0, 1.0, 8.0, 16.0])
    c = simulate_concentration([DoseRecord("levetiracetam", 0.0, 60.0)], table, t)
    np.testing.assert_allclose(c.values["levetiracetam"], 60.0 * 0.5 ** (t / 8.0), rtol=1e-14)


def test_infusion_plateau():
    # long infusion approaches rate / lam
    table = DrugTable.default()
    lam = table.rate("propofol")
    c = simulate_concentration([DoseRecord("propofol", 0.0, 3.0 * 50, 50.0)], table, [49.0])
    assert c.values["propofol"][0] == pytest.approx(3.0 / lam, rel=1e-12)


def test_matches_fine_step_integration():
    rng = np.random.default_rng(11)
    table = DrugTable.default()
    for _ in range(5):
        doses, sched = [], []
        for _ in range(rng.integers(1, 4)):
            start = int(rng.integers(0, 6 * 3600))
            dur = 0 if rng.random() < 0.5 else int(rng.integers(60, 7200))
            amount = float(rng.uniform(5, 60))
            doses.append(DoseRecord("levetiracetam", start / 3600.0, amount, dur / 3600.0))
            sched.append((start, amount, dur))
        grid = np.arange(1, 9) * 1.0
        exact = simulate_concentration(doses, table, grid).values["levetiracetam"]
        oracle = rk4_concentrations([sched], [8.0], grid)[0]
        np.testing.assert_allclose(exact, oracle, rtol=1e-9)


def test_advance_concentration_agrees_with_closed_form():
    table = DrugTable.default()
    lam = np.array([table.rate("midazolam")])
    grid = np.arange(1, 13) / 6.0
    doses = [DoseRecord("midazolam", 0.0, 0.2), DoseRecord("midazolam", 0.0, 0.6, 2.0)]
    ref = simulate_concentration(doses, table, grid).values["midazolam"]
    conc = np.zeros(1)
    out = []
    for i in range(grid.size):
        conc = advance_concentration(conc, lam, 1 / 6.0, bolus=np.array([0.2]) if i == 0 else None,
                                     rate=np.array([0.3]))
        out.append(conc[0])
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_unknown_drug_and_bad_doses():
    with pytest.raises(KeyError):
        simulate_concentration([DoseRecord("aspirin", 0.0, 1.0)], DrugTable.default(), [1.0])
    with pytest.raises(ValueError):
        DoseRecord("propofol", -1.0, 1.0)
    with pytest.raises(ValueError):
        DoseRecord("propofol", 0.0, -1.0)
    with pytest.raises(ValueError):
        DrugTable.from_config({"drugs.x.half_life_hours": 0.0})


@given(st.floats(0.0, 100.0), st.floats(0.0, 10.0), st.floats(0.01, 100.0))
def test_hill_term_bounds(conc, n, ed50):
    h = hill_terms(np.array([conc]), np.array([n]), np.array([ed50]))[0]
    assert 0.0 <= h <= 1.0
    if conc == 0 or n == 0:
        assert h == 0.0


def test_hill_half_effect_at_ed50():
    p = PdParams({"propofol": DrugPd(2.0, 1.5)})
    z = hill_suppression({"propofol": np.array([1.5])}, p)
    assert z[0] == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=50)
@given(st.lists(st.floats(0.0, 50.0), min_size=2, max_size=2),
       st.lists(st.floats(0.0, 5.0), min_size=2, max_size=2))
def test_suppression_clipped(conc, n):
    p = PdParams({"a": DrugPd(n[0], 1.0), "b": DrugPd(n[1], 2.0)})
    z = hill_suppression({"a": np.array([conc[0]]), "b": np.array([conc[1]])}, p)
    assert 0.0 <= z[0] <= 1.0


def _synthetic_patient(n, ed50, rng, noise=0.0):
    table = DrugTable.default()
    grid = (np.arange(144) + 0.5) / 6.0
    doses = [DoseRecord("levetiracetam", 2.0, 60.0), DoseRecord("levetiracetam", 14.0, 30.0)]
    conc = simulate_concentration(doses, table, grid)
    z = hill_suppression(conc.values, PdParams({"levetiracetam": DrugPd(n, ed50)}))
    base = 0.6
    frac = base * z + rng.normal(0.0, noise, grid.size)
    return conc, np.clip(frac, 0.0, 1.0), base


def test_noiseless_fit_recovers_parameters():
    rng = np.random.default_rng(2)
    for _ in range(3):
        n, ed = rng.uniform(1.0, 4.0), rng.uniform(10.0, 40.0)
        conc, frac, base = _synthetic_patient(n, ed, rng)
        fit = fit_pd_params(conc, frac, ["levetiracetam"], baseline=base, seed=1)
        assert fit["levetiracetam"].fit_status == "fitted"
        assert fit["levetiracetam"].hill_n == pytest.approx(n, rel=1e-3)
        assert fit["levetiracetam"].ed50 == pytest.approx(ed, rel=1e-3)


def test_positive_association_is_zeroed():
    table = DrugTable.default()
    grid = (np.arange(144) + 0.5) / 6.0
    conc = simulate_concentration([DoseRecord("levetiracetam", 2.0, 60.0)], table, grid)
    frac = 0.1 + conc.values["levetiracetam"] / 200.0
    fit = fit_pd_params(conc, frac, ["levetiracetam"], baseline=0.5)
    assert fit["levetiracetam"].hill_n == 0.0
    assert fit["levetiracetam"].fit_status == "zeroed"


def test_unexposed_drug_falls_back_to_default():
    grid = np.arange(5) + 0.5
    fit = fit_pd_params({"lacosamide": np.zeros(5)}, np.full(5, 0.3), ["lacosamide"])
    assert fit["lacosamide"] == DrugPd(1.0, DEFAULT_DRUG_TABLE["lacosamide"].default_ed50,
                                       "unidentifiable")


def test_population_median_requires_fits():
    fits = [PdParams({"propofol": DrugPd(2.0, e)}) for e in (1.0, 3.0, 2.0)]
    assert population_median_ed50(fits, "propofol") == 2.0
    with pytest.raises(ValueError):
        population_median_ed50(fits, "midazolam")
