"""One-compartment pharmacokinetics and Hill-type EA suppression.

Concentrations follow the linear ODE

    dD/dt = -lambda * D + W(t),   lambda = ln 2 / half_life

with bolus doses adding instantly and infusions contributing a constant
rate over their duration. Because the system is linear the solution is a
sum of closed-form responses, one per dose record, and is exact on any
grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import optimize

LN2 = math.log(2.0)


@dataclass(frozen=True)
class DrugSpec:
    half_life_hours: float
    default_ed50: float  # mg/kg, used when a patient's response is unidentifiable


# Half-lives are the literature values used for the studied ASMs. The
# default ED50 values are placeholders for unidentifiable fits.
DEFAULT_DRUG_TABLE: dict[str, DrugSpec] = {
    "propofol": DrugSpec(20.0 / 60.0, 0.5),
    "midazolam": DrugSpec(2.5, 0.2),
    "levetiracetam": DrugSpec(8.0, 5.0),
    "lacosamide": DrugSpec(11.0, 3.0),
    "phenobarbital": DrugSpec(79.0, 10.0),
    "valproate": DrugSpec(16.0, 15.0),
    "pentobarbital": DrugSpec(20.0, 5.0),
    "lorazepam": DrugSpec(15.0, 0.05),
    "diazepam": DrugSpec(43.0, 0.2),
    "fosphenytoin": DrugSpec(15.0 / 60.0, 10.0),
}


class DrugTable(dict):
    """Mapping drug name -> :class:`DrugSpec`."""

    @classmethod
    def default(cls) -> "DrugTable":
        return cls(DEFAULT_DRUG_TABLE)

    @classmethod
    def from_config(cls, cfg: Mapping) -> "DrugTable":
        table = cls()
        names = sorted({k.split(".")[1] for k in cfg if k.startswith("drugs.")})
        for name in names:
            base = DEFAULT_DRUG_TABLE.get(name)
            hl = cfg.get(f"drugs.{name}.half_life_hours", base.half_life_hours if base else None)
            ed = cfg.get(f"drugs.{name}.default_ed50", base.default_ed50 if base else 1.0)
            if hl is None:
                raise ValueError(f"drug {name!r} has no half-life")
            table[name] = DrugSpec(float(hl), float(ed))
        for name, spec in table.items():
            if not spec.half_life_hours > 0:
                raise ValueError(f"half-life of {name!r} must be positive")
        return table

    def rate(self, drug: str) -> float:
        """Elimination rate constant (1/h)."""
        return LN2 / self[drug].half_life_hours


@dataclass(frozen=True)
class DoseRecord:
    """One administration. ``duration == 0`` is a bolus of ``amount`` mg/kg;
    otherwise ``amount`` mg/kg is infused at a constant rate over ``duration`` hours."""

    drug: str
    time: float
    amount: float
    duration: float = 0.0

    def __post_init__(self):
        if self.time < 0:
            raise ValueError(f"dose time must be >= 0, got {self.time}")
        if self.amount < 0:
            raise ValueError(f"dose must be >= 0, got {self.amount}")
        if self.duration < 0:
            raise ValueError(f"infusion duration must be >= 0, got {self.duration}")

    @property
    def rate(self) -> float:
        return self.amount / self.duration if self.duration > 0 else math.inf


def _dose_response(dose: DoseRecord, lam: float, t: np.ndarray) -> np.ndarray:
    """Closed-form concentration contributed by a single dose record."""
    out = np.zeros_like(t, dtype=float)
    dt = t - dose.time
    on = dt >= 0
    if dose.duration == 0:
        out[on] = dose.amount * np.exp(-lam * dt[on])
        return out
    r = dose.amount / dose.duration
    during = on & (dt <= dose.duration)
    after = dt > dose.duration
    out[during] = r / lam * -np.expm1(-lam * dt[during])
    peak = r / lam * -math.expm1(-lam * dose.duration)
    out[after] = peak * np.exp(-lam * (dt[after] - dose.duration))
    return out


@dataclass
class ConcentrationSeries:
    """Per-drug concentrations (mg/kg) produced by a dosing history.

    ``values[drug]`` holds the concentration on ``grid``; :meth:`evaluate`
    re-evaluates the same closed form on any other grid.
    """

    grid: np.ndarray
    values: dict[str, np.ndarray]
    doses: tuple[DoseRecord, ...] = ()
    drug_table: DrugTable = field(default_factory=DrugTable.default)

    @property
    def drugs(self) -> list[str]:
        return sorted(self.values)

    def evaluate(self, grid: Sequence[float]) -> dict[str, np.ndarray]:
        return simulate_concentration(self.doses, self.drug_table, grid).values

    def matrix(self, drugs: Sequence[str]) -> np.ndarray:
        """Concentrations stacked as (len(drugs), len(grid)); absent drugs are 0."""
        return np.stack([self.values.get(d, np.zeros_like(self.grid)) for d in drugs])


def simulate_concentration(doses: Iterable[DoseRecord], drug_table: Mapping[str, DrugSpec],
                           grid: Sequence[float]) -> ConcentrationSeries:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1:
        raise ValueError("grid must be one-dimensional")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    doses = tuple(doses)
    values: dict[str, np.ndarray] = {}
    for dose in doses:
        if dose.drug not in drug_table:
            raise KeyError(f"unknown drug {dose.drug!r}")
        lam = LN2 / drug_table[dose.drug].half_life_hours
        acc = values.setdefault(dose.drug, np.zeros_like(grid))
        acc += _dose_response(dose, lam, grid)
    if not isinstance(drug_table, DrugTable):
        drug_table = DrugTable(drug_table)
    return ConcentrationSeries(grid, values, doses, drug_table)


def hill_terms(conc: np.ndarray, hill_n: np.ndarray, ed50: np.ndarray) -> np.ndarray:
    """Per-drug suppression D^N / (D^N + ED50^N).

    ``conc`` has drugs on axis 0. Zero concentration and ``N == 0``
    (a non-responder) both give no suppression.
    """
    conc = np.asarray(conc, dtype=float)
    shape = (-1,) + (1,) * (conc.ndim - 1)
    n = np.asarray(hill_n, dtype=float).reshape(shape)
    ed = np.asarray(ed50, dtype=float).reshape(shape)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        ratio = np.power(ed / conc, n)
        out = 1.0 / (1.0 + ratio)
    out = np.where((conc > 0) & (n > 0), out, 0.0)
    return out


@dataclass(frozen=True)
class DrugPd:
    hill_n: float
    ed50: float
    fit_status: str = "fitted"  # fitted | unidentifiable | zeroed


class PdParams(dict):
    """Mapping drug -> :class:`DrugPd` for one patient."""

    def arrays(self, drugs: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        n = np.array([self[d].hill_n if d in self else 0.0 for d in drugs])
        ed = np.array([self[d].ed50 if d in self else 1.0 for d in drugs])
        return n, ed


def hill_suppression(concentrations: Mapping[str, np.ndarray] | np.ndarray,
                     params: PdParams, drugs: Sequence[str] | None = None) -> np.ndarray:
    """Burden multiplier ``Z = 1 - sum_j D_j^N / (D_j^N + ED50_j^N)`` clipped to [0, 1]."""
    if isinstance(concentrations, Mapping):
        drugs = sorted(concentrations) if drugs is None else list(drugs)
        conc = np.stack([np.asarray(concentrations[d], dtype=float) for d in drugs]) if drugs \
            else np.zeros((0,))
    else:
        conc = np.asarray(concentrations, dtype=float)
        if drugs is None:
            raise ValueError("drugs must be given when concentrations is an array")
    if len(drugs) == 0:
        return np.ones(())
    if np.any(conc < 0):
        raise ValueError("concentrations must be non-negative")
    n, ed = params.arrays(drugs)
    z = 1.0 - hill_terms(conc, n, ed).sum(axis=0)
    return np.clip(z, 0.0, 1.0)


def advance_concentration(conc: np.ndarray, lam: np.ndarray, dt: float,
                          bolus: np.ndarray | None = None,
                          rate: np.ndarray | None = None) -> np.ndarray:
    """Exact one-step update: bolus at the step start, constant infusion during it."""
    decay = np.exp(-lam * dt)
    if bolus is not None:
        conc = conc + bolus
    out = conc * decay
    if rate is not None:
        out = out + rate / lam * -np.expm1(-lam * dt)
    return out


def _pd_objective(theta, conc, z_obs):
    m = conc.shape[0]
    log_ed = theta[:m]
    n = theta[m:]
    z = 1.0 - hill_terms(conc, n, np.exp(log_ed)).sum(axis=0)
    z = np.clip(z, 0.0, 1.0)
    return float(np.sum((z - z_obs) ** 2))


def fit_pd_params(concentration: ConcentrationSeries | Mapping[str, np.ndarray],
                  ea_fraction: Sequence[float], drugs_given: Iterable[str],
                  drug_table: Mapping[str, DrugSpec] | None = None,
                  baseline: float = 1.0, n_starts: int = 4, max_iter: int = 500,
                  min_samples: int = 10, max_hill: float = 20.0,
                  seed: int = 0) -> PdParams:
    """Least-squares Hill parameters for each administered drug.

    ``ea_fraction`` is the observed EA fraction on the concentration grid;
    dividing by ``baseline`` turns it into the observed multiplier that the
    model predicts. Drugs with no signal fall back to ``(N=1, default ED50)``
    and drugs whose concentration correlates positively with burden are
    reported as non-responders (``N = 0``).
    """
    table = drug_table if drug_table is not None else DEFAULT_DRUG_TABLE
    values = concentration.values if isinstance(concentration, ConcentrationSeries) \
        else concentration
    z_obs = np.clip(np.asarray(ea_fraction, dtype=float) / baseline, 0.0, 1.0)
    if np.any(~np.isfinite(z_obs)):
        raise ValueError("ea_fraction must be finite")

    params = PdParams()
    fit_drugs = []
    for drug in sorted(set(drugs_given)):
        d = np.asarray(values.get(drug, np.zeros_like(z_obs)), dtype=float)
        default = DrugPd(1.0, table[drug].default_ed50, "unidentifiable")
        exposed = d > 0
        if exposed.sum() < min_samples or np.ptp(d) == 0:
            params[drug] = default
            continue
        if np.ptp(z_obs[exposed]) > 0 and np.corrcoef(d[exposed], z_obs[exposed])[0, 1] > 0:
            params[drug] = DrugPd(0.0, table[drug].default_ed50, "zeroed")
            continue
        fit_drugs.append(drug)
    if not fit_drugs:
        return params

    conc = np.stack([np.asarray(values[d], dtype=float) for d in fit_drugs])
    m = len(fit_drugs)
    rng = np.random.default_rng(seed)
    pos_q = [np.quantile(c[c > 0], [0.25, 0.5, 0.75]) for c in conc]
    starts = []
    for i in range(n_starts):
        if i < 3:
            log_ed = [math.log(q[i]) for q in pos_q]
        else:
            log_ed = [math.log(q[1]) + rng.normal(0.0, 1.0) for q in pos_q]
        hill = [1.0 + 2.0 * (i % 2)] * m if i < 3 else list(rng.uniform(0.5, 4.0, m))
        starts.append(np.clip(log_ed + hill, [-20.0] * m + [0.0] * m, [20.0] * m + [max_hill] * m))

    bounds = [(-20.0, 20.0)] * m + [(0.0, max_hill)] * m
    best = None
    for x0 in starts:
        res = optimize.minimize(_pd_objective, x0, args=(conc, z_obs), method="Nelder-Mead",
                                bounds=bounds,
                                options={"maxiter": max_iter, "xatol": 1e-10, "fatol": 1e-10})
        if best is None or res.fun < best.fun:
            best = res
    # restart from the incumbent until the objective stops improving
    for _ in range(5):
        res = optimize.minimize(_pd_objective, best.x, args=(conc, z_obs), method="Nelder-Mead",
                                bounds=bounds,
                                options={"maxiter": max_iter, "xatol": 1e-10, "fatol": 1e-10})
        improved = best.fun - res.fun
        if res.fun < best.fun:
            best = res
        if improved < 1e-10:
            break

    for j, drug in enumerate(fit_drugs):
        n = float(best.x[m + j])
        ed = float(math.exp(best.x[j]))
        status = "zeroed" if n == 0.0 else "fitted"
        params[drug] = DrugPd(n, ed, status)
    return params


def population_median_ed50(fits: Iterable[PdParams], drug: str) -> float:
    """Median ED50 over patients whose fit for ``drug`` succeeded."""
    vals = [p[drug].ed50 for p in fits if drug in p and p[drug].fit_status == "fitted"]
    if not vals:
        raise ValueError(f"no fitted ED50 values for {drug!r}; use the drug table default instead")
    return float(np.median(vals))
