"""
Drug exposure and EA suppression for one patient
================================================

Builds a dosing history (a levetiracetam bolus and a propofol infusion),
evaluates the one-compartment concentrations, generates an EA fraction from a
known Hill response, and recovers the Hill parameters by least squares.
"""
import numpy as np

from eacause.pkpd import (DoseRecord, DrugPd, DrugTable, PdParams, fit_pd_params,
                          hill_suppression, simulate_concentration)

table = DrugTable.default()
grid = np.arange(0, 24, 1 / 6)  # 10-minute clock, hours

doses = [
    DoseRecord("levetiracetam", time=2.0, amount=40.0),
    DoseRecord("propofol", time=6.0, amount=3.0, duration=4.0),
]
conc = simulate_concentration(doses, table, grid)
for drug in conc.drugs:
    c = conc.values[drug]
    print(f"{drug:14s} peak {c.max():7.3f} mg/kg at {grid[c.argmax()]:5.2f} h")

# known response: burden 0.6 before treatment, suppressed by both drugs
true = PdParams({"levetiracetam": DrugPd(2.0, 20.0, "fitted"),
                 "propofol": DrugPd(3.0, 0.2, "fitted")})
baseline = 0.6
ea = baseline * hill_suppression(conc.values, true)
rng = np.random.default_rng(7)
noisy = np.clip(ea + rng.normal(0, 0.03, ea.size), 0, 1)

fit = fit_pd_params(conc, noisy, conc.drugs, table, baseline=baseline, seed=1)
print()
print("drug            true N  fit N   true ED50  fit ED50")
for drug in conc.drugs:
    t, f = true[drug], fit[drug]
    print(f"{drug:14s} {t.hill_n:6.2f} {f.hill_n:6.2f} {t.ed50:10.3f} {f.ed50:9.3f}")
