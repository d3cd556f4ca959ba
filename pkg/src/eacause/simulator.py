"""Synthetic ICU cohorts with an EA -> treatment -> EA feedback loop and known counterfactuals.

Every patient gets pre-admission covariates and a latent severity that
raises both the baseline EA process and the risk of a poor outcome. EA
evolves in 10-minute steps (300 two-second segments each). A reactive
physician doses anti-seizure drugs when the trailing one-hour EA fraction
crosses a threshold; drug concentrations follow the one-compartment PK
model and suppress EA through each patient's Hill response. The same
patient is also simulated with all doses withheld, reusing the factual
random numbers segment by segment, which gives the counterfactual burden
under no treatment. Outcomes come from a logistic model on the burden
bin, the treated flag, covariates and latent severity.

None of this is meant to be physiologically faithful; it is an oracle with
the same causal structure as observational EEG cohorts.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

from .burden import E_MAX_EDGES, E_MEAN_EDGES, LEVELS, bin_index, window_fractions_from_counts
from .cohort import Cohort, CovariateSchema, PatientRecord
from .pkpd import DEFAULT_DRUG_TABLE, LN2, DoseRecord

log = logging.getLogger(__name__)

SEGMENTS_PER_STEP = 300
STEP_HOURS = 1.0 / 6.0
STEPS_PER_WINDOW = 36

COVARIATES = CovariateSchema(
    ("age", "male", "hx_epilepsy", "hie", "abi", "apache", "gcs"),
    ("continuous", "binary", "binary", "binary", "binary", "continuous", "continuous"),
)


class ScenarioError(ValueError):
    pass


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class ScenarioConfig:
    """Every knob of the generative model; the defaults form the "default" scenario.

    The defaults put most of the confounding on two binary pathologies
    (``hie`` raises EA and risk, ``abi`` raises risk). Strong, measured,
    binary prognostics match exactly and keep per-arm outcome variance low,
    so a 2000-patient cohort can recover per-arm APOs to a few points while
    naive arm means are off by 0.05 to 0.15. ``hie`` is common (one in two)
    so that every burden arm still holds patients with and without it.
    Treatment needs a high trailing EA fraction and an attentive physician,
    leaving the untreated severe arms populated.
    """

    n_patients: int = 600
    seed: int = 0
    hours: float = 24.0
    # covariates
    age_mean: float = 61.0
    age_sd: float = 18.0
    male_prob: float = 0.48
    hx_epilepsy_prob: float = 0.25
    hie_prob: float = 0.5
    abi_prob: float = 0.4
    weight_mean: float = 80.0
    weight_sd: float = 15.0
    # latent severity S ~ N(severity_hie * hie, 1), seen through noisy scores
    severity_hie: float = 0.0
    apache_base: float = 19.0
    apache_severity: float = 7.0
    apache_noise: float = 1.5
    gcs_base: float = 11.0
    gcs_severity: float = -3.0
    gcs_noise: float = 0.8
    # baseline EA: logit = intercept + effects + patient noise + AR(1)
    ea_intercept: float = -1.5
    ea_severity: float = 0.2
    ea_hx: float = 0.8
    ea_hie: float = 1.5
    ea_patient_sd: float = 1.5
    ea_ar: float = 0.95
    ea_ar_sd: float = 0.8
    # true PD response
    ed50_log_sd: float = 0.5
    hill_mean: float = 2.0
    hill_sd: float = 0.5
    nonresponder_prob: float = 0.3
    # physician policy
    policy: str = "reactive"  # reactive | never
    attentive_intercept: float = -1.0
    attentive_hx: float = 1.5
    threshold: float = 0.6
    lookback_hours: float = 1.0
    first_line: Mapping[str, float] = field(default_factory=lambda: {"levetiracetam": 1.0})
    load_dose: float = 60.0
    maintenance_dose: float = 30.0
    maintenance_hours: float = 12.0
    escalation_drug: str = "propofol"
    escalation_threshold: float = 0.3
    escalation_after_hours: float = 2.0
    escalation_rate: float = 3.0
    escalation_hours: float = 2.0
    # EEG duration
    short_eeg_fraction: float = 0.02
    min_eeg_hours: float = 2.0
    # outcome model
    outcome_summary: str = "e_max"
    outcome_edges: Sequence[float] = (0.25, 0.5, 0.75)
    outcome_effects: Sequence[float] = (0.0, 0.5, 1.0, 1.5)
    outcome_intercept: float = -3.0
    outcome_treated: float = 0.0
    outcome_age: float = 0.2
    outcome_severity: float = 0.3
    outcome_hx: float = 0.0
    outcome_hie: float = 3.0
    outcome_abi: float = 3.5
    interaction_covariate: str | None = None
    interaction_scale: float = 1.0
    require_confounding: bool = False

    def validate(self) -> None:
        bad = []
        if not (isinstance(self.n_patients, (int, np.integer)) and self.n_patients >= 1):
            bad.append("n_patients")
        for f in ("male_prob", "hx_epilepsy_prob", "hie_prob", "abi_prob", "nonresponder_prob",
                  "threshold", "escalation_threshold", "short_eeg_fraction"):
            v = getattr(self, f)
            if not 0.0 <= v <= 1.0:
                bad.append(f)
        for f in ("age_sd", "weight_sd", "apache_noise", "gcs_noise", "ea_patient_sd", "ea_ar_sd",
                  "ed50_log_sd", "hill_sd", "load_dose", "maintenance_dose", "escalation_rate"):
            if getattr(self, f) < 0:
                bad.append(f)
        if not 0.0 <= self.ea_ar < 1.0:
            bad.append("ea_ar")
        if not self.hours >= self.lookback_hours or self.hours <= 0:
            bad.append("hours")
        if self.policy not in ("reactive", "never"):
            bad.append("policy")
        if self.outcome_summary not in ("e_max", "e_mean"):
            bad.append("outcome_summary")
        edges = list(self.outcome_edges)
        if edges != sorted(edges) or any(not 0 < e < 1 for e in edges) \
                or len(self.outcome_effects) != len(edges) + 1:
            bad.append("outcome_edges/outcome_effects")
        drugs = list(self.first_line) + [self.escalation_drug]
        if any(d not in DEFAULT_DRUG_TABLE for d in drugs) or not self.first_line \
                or any(w < 0 for w in self.first_line.values()) or sum(self.first_line.values()) <= 0:
            bad.append("first_line/escalation_drug")
        if self.escalation_drug in self.first_line:
            bad.append("escalation_drug")
        if self.interaction_covariate is not None and \
                self.interaction_covariate not in COVARIATES.binary():
            bad.append("interaction_covariate")
        if bad:
            raise ScenarioError(f"invalid scenario fields: {', '.join(bad)}")

    @property
    def drugs(self) -> list[str]:
        return sorted(self.first_line) + [self.escalation_drug]

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ScenarioConfig":
        if name not in SCENARIOS:
            raise ScenarioError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
        kw = dict(SCENARIOS[name])
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_config(cls, section: Mapping[str, Any], seed: int) -> "ScenarioConfig":
        """Build from the ``simulator.*`` section of a run config."""
        kw = {k: v for k, v in section.items() if k not in ("scenario", "write_streams")}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(kw) - names)
        if unknown:
            raise ScenarioError(f"unknown simulator fields: {', '.join(unknown)}")
        kw.setdefault("seed", seed)
        for key in ("outcome_edges", "outcome_effects"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls.preset(section.get("scenario", "default"), **kw)


# Named scenarios. "default" has strong measured confounding through
# binary pathologies; "calibrated" is tuned so the no-treatment contrast between very
# severe and mild E_max is about 0.22 on a baseline near 0.53, with a milder
# hie -> EA link so that the mild arm keeps enough high-risk patients.
SCENARIOS: dict[str, dict[str, Any]] = {
    "default": {"require_confounding": True},
    "calibrated": {"outcome_intercept": -2.1, "outcome_effects": (0.0, 0.6, 1.2, 1.85),
              "hie_prob": 0.3, "ea_hie": 1.0, "ea_intercept": -1.3, "require_confounding": True},
    "null": {"outcome_effects": (0.0, 0.0, 0.0, 0.0)},
    "never_treat": {"policy": "never"},
    "inflection": {"outcome_edges": (0.1, 0.15, 0.2, 0.25, 0.5),
                   "outcome_effects": (0.0, 0.0, 0.0, 1.5, 1.5, 1.5)},
    "interaction": {"interaction_covariate": "hie", "interaction_scale": 2.0},
}


@dataclass
class GroundTruth:
    """Counterfactual quantities under no treatment.

    ``potential[i, l]`` is patient i's outcome probability had the
    outcome-summary burden been in level ``l`` without treatment (nan when
    the outcome model is not constant over that level).
    """

    ids: list[str]
    cf_e_max: np.ndarray
    cf_e_mean: np.ndarray
    cf_outcome_prob: np.ndarray
    potential: np.ndarray
    analyzed: np.ndarray  # recording long enough to enter the analysis
    outcome_summary: str = "e_max"
    e_max_edges: tuple = E_MAX_EDGES
    e_mean_edges: tuple = E_MEAN_EDGES

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"patient_id": self.ids, "cf_e_max": self.cf_e_max,
                             "cf_e_mean": self.cf_e_mean, "cf_outcome_prob": self.cf_outcome_prob})

    def arm_frame(self) -> pd.DataFrame:
        rows = []
        for summary in ("e_max", "e_mean"):
            for level in LEVELS:
                for kind in ("interventional", "conditional"):
                    try:
                        v = true_apo(self, summary, level, kind)
                    except ValueError:
                        v = math.nan
                    rows.append((summary, level, kind, v))
        return pd.DataFrame(rows, columns=["summary", "arm_burden", "kind", "true_apo"])


def _level_index(level) -> int:
    if isinstance(level, str):
        return LEVELS.index(level)
    return int(level)


def true_apo(truth: GroundTruth, summary: str = "e_max", level="mild",
             kind: str = "interventional") -> float:
    """True probability of a poor outcome in a burden arm under no treatment.

    ``interventional`` averages every analyzed patient's outcome probability
    with the burden set into the arm, the quantity matching estimates.
    ``conditional`` averages counterfactual outcome probabilities over the
    patients whose own no-treatment burden falls in the arm.
    """
    li = _level_index(level)
    mask = truth.analyzed
    if kind == "interventional":
        if summary != truth.outcome_summary:
            raise ValueError(f"outcome depends on {truth.outcome_summary}; "
                             f"no interventional APO for {summary}")
        vals = truth.potential[mask, li]
        if vals.size == 0:
            raise ValueError("no analyzed patients")
        if np.any(np.isnan(vals)):
            raise ValueError("outcome model varies within this level; use kind='conditional'")
        return float(vals.mean())
    if kind != "conditional":
        raise ValueError(f"unknown kind {kind!r}")
    e = truth.cf_e_max if summary == "e_max" else truth.cf_e_mean
    edges = truth.e_max_edges if summary == "e_max" else truth.e_mean_edges
    in_arm = mask & (bin_index(e, edges) == li)
    if not in_arm.any():
        raise ValueError(f"arm {LEVELS[li]!r} is empty")
    return float(truth.cf_outcome_prob[in_arm].mean())


def _window_summary(counts: np.ndarray, n_valid: np.ndarray) -> tuple[float, float]:
    wf = window_fractions_from_counts(counts, n_valid, STEPS_PER_WINDOW, STEP_HOURS)
    return float(wf.fraction.max()), float(wf.fraction.mean())


@dataclass
class _Patient:
    record: PatientRecord
    cf_e_max: float
    cf_e_mean: float
    cf_prob: float
    potential: np.ndarray
    treated: bool
    e_max: float
    segments: np.ndarray | None = None


def _outcome_logit(cfg: ScenarioConfig, effect: np.ndarray | float, treated: float, cov: dict,
                   severity: float) -> np.ndarray:
    scale = 1.0
    if cfg.interaction_covariate is not None and cov[cfg.interaction_covariate]:
        scale = cfg.interaction_scale
    return (cfg.outcome_intercept + scale * np.asarray(effect) + cfg.outcome_treated * treated
            + cfg.outcome_age * (cov["age"] - 61.0) / 18.0 + cfg.outcome_severity * severity
            + cfg.outcome_hx * cov["hx_epilepsy"] + cfg.outcome_hie * cov["hie"]
            + cfg.outcome_abi * cov["abi"])


def _potential_effects(cfg: ScenarioConfig, arm_edges) -> np.ndarray:
    """Outcome effect per arm level, nan when the effect is not constant on it."""
    grid = np.linspace(0.0, 1.0, 2001)
    eff = np.asarray(cfg.outcome_effects)[bin_index(grid, cfg.outcome_edges)]
    arm = bin_index(grid, arm_edges)
    out = np.full(len(LEVELS), np.nan)
    for level in range(len(LEVELS)):
        vals = eff[arm == level]
        if vals.size and np.all(vals == vals[0]):
            out[level] = vals[0]
    return out


def _simulate_patient(cfg: ScenarioConfig, idx: int, pot_eff: np.ndarray,
                      keep_segments: bool) -> _Patient:
    rng = np.random.default_rng([cfg.seed, idx])
    n_steps = int(round(cfg.hours / STEP_HOURS))
    # fixed draw order so that every patient's numbers do not depend on policy branches
    zc = rng.standard_normal(6)
    uc = rng.random(10)
    innov = rng.standard_normal(n_steps)
    useg = rng.random((n_steps, SEGMENTS_PER_STEP))
    pd_z = rng.standard_normal((2, len(cfg.drugs)))
    pd_u = rng.random(len(cfg.drugs))

    hie = float(uc[3] < cfg.hie_prob)
    severity = cfg.severity_hie * hie + zc[0]
    cov = {
        "age": float(np.clip(cfg.age_mean + cfg.age_sd * zc[1], 18.0, 100.0)),
        "male": float(uc[0] < cfg.male_prob),
        "hx_epilepsy": float(uc[1] < cfg.hx_epilepsy_prob),
        "hie": hie,
        "abi": float(uc[2] < cfg.abi_prob),
        "apache": cfg.apache_base + cfg.apache_severity * severity + cfg.apache_noise * zc[2],
        "gcs": float(np.clip(cfg.gcs_base + cfg.gcs_severity * severity + cfg.gcs_noise * zc[3],
                             3.0, 15.0)),
    }
    weight = max(35.0, cfg.weight_mean + cfg.weight_sd * zc[4])
    eeg_hours = cfg.hours
    if uc[4] < cfg.short_eeg_fraction:
        eeg_hours = round(0.5 + 1.4 * uc[5], 4)

    mu = (cfg.ea_intercept + cfg.ea_severity * severity + cfg.ea_hx * cov["hx_epilepsy"]
          + cfg.ea_hie * hie + cfg.ea_patient_sd * zc[5])
    ar = np.empty(n_steps)
    ar[0] = cfg.ea_ar_sd * innov[0]
    sd_in = cfg.ea_ar_sd * math.sqrt(1.0 - cfg.ea_ar ** 2)
    for t in range(1, n_steps):
        ar[t] = cfg.ea_ar * ar[t - 1] + sd_in * innov[t]
    base = _expit(mu + ar)

    # counterfactual: no doses ever
    cf_seg = useg < base[:, None]
    cf_counts = cf_seg.sum(axis=1)
    full = np.full(n_steps, SEGMENTS_PER_STEP)
    cf_e_max, cf_e_mean = _window_summary(cf_counts, full)

    # factual: identical to the counterfactual until the first dose
    counts = cf_counts.copy()
    p_step = base.copy()
    doses: list[DoseRecord] = []
    lookback = int(round(cfg.lookback_hours / STEP_HOURS))
    attentive = cfg.policy == "reactive" and \
        uc[6] < _expit(cfg.attentive_intercept + cfg.attentive_hx * cov["hx_epilepsy"])
    if attentive:
        trailing = np.convolve(cf_counts, np.ones(lookback), "valid")[:-1] / (lookback * SEGMENTS_PER_STEP)
        over = np.flatnonzero(trailing > cfg.threshold)
        if over.size:
            first = int(over[0]) + lookback
            counts, p_step, doses = _treat_from(cfg, first, base, useg, counts, p_step, lookback,
                                                uc[7], pd_z, pd_u)
    treated = bool(doses)
    e_max, e_mean = _window_summary(counts, full)
    summary_val = e_max if cfg.outcome_summary == "e_max" else e_mean
    cf_summary = cf_e_max if cfg.outcome_summary == "e_max" else cf_e_mean

    effects = np.asarray(cfg.outcome_effects)
    eff_f = effects[bin_index(summary_val, cfg.outcome_edges)]
    eff_cf = effects[bin_index(cf_summary, cfg.outcome_edges)]
    p_factual = float(_expit(_outcome_logit(cfg, eff_f, float(treated), cov, severity)))
    cf_prob = float(_expit(_outcome_logit(cfg, eff_cf, 0.0, cov, severity)))
    potential = _expit(_outcome_logit(cfg, pot_eff, 0.0, cov, severity))
    poor = uc[8] < p_factual
    mrs = 4 + min(2, int(3 * uc[9])) if poor else min(3, int(4 * uc[9]))

    n_obs = min(n_steps, int(math.floor(eeg_hours / STEP_HOURS + 1e-9)))
    ea_counts = np.column_stack([counts[:n_obs], full[:n_obs]]).astype(np.int64)
    segments = None
    if keep_segments:
        segments = _contiguous_labels(counts[:n_obs], np.random.default_rng([cfg.seed, idx, 1]))
    record = PatientRecord(f"P{idx + 1:05d}", np.array([cov[c] for c in COVARIATES.names]), mrs,
                           round(weight, 2), tuple(doses), eeg_hours, None, ea_counts)
    return _Patient(record, cf_e_max, cf_e_mean, cf_prob, potential, treated, e_max, segments)


def _treat_from(cfg, first, base, useg, counts, p_step, lookback, u_drug, pd_z, pd_u):
    """Replay the factual trajectory from the first dose on."""
    drugs = cfg.drugs
    names = sorted(cfg.first_line)
    weights = np.array([cfg.first_line[d] for d in names], dtype=float)
    choice = names[int(np.searchsorted(np.cumsum(weights) / weights.sum(), u_drug, side="right"))
                   if u_drug < 1.0 else len(names) - 1]
    esc = cfg.escalation_drug
    ed50 = {}
    hill = {}
    for j, d in enumerate(drugs):
        ed50[d] = DEFAULT_DRUG_TABLE[d].default_ed50 * math.exp(cfg.ed50_log_sd * pd_z[0, j])
        hill[d] = 0.0 if pd_u[j] < cfg.nonresponder_prob else max(0.3, cfg.hill_mean + cfg.hill_sd * pd_z[1, j])
    lam = {d: LN2 / DEFAULT_DRUG_TABLE[d].half_life_hours for d in (choice, esc)}
    conc = {choice: 0.0, esc: 0.0}
    rate = {choice: 0.0, esc: 0.0}
    dt = STEP_HOURS
    n_steps = base.size
    doses = []
    start_time = first * dt
    next_maint = math.inf
    inf_end = -1
    esc_steps = int(round(cfg.escalation_hours / dt))
    after_steps = int(round(cfg.escalation_after_hours / dt))
    counts = counts.copy()
    p_step = p_step.copy()
    for s in range(first, n_steps):
        t = round(s * dt, 10)
        if s == inf_end:
            rate[esc] = 0.0
        bolus = {choice: 0.0, esc: 0.0}
        if s == first:
            bolus[choice] += cfg.load_dose
            doses.append(DoseRecord(choice, t, cfg.load_dose))
            next_maint = s + int(round(cfg.maintenance_hours / dt))
        elif s == next_maint:
            bolus[choice] += cfg.maintenance_dose
            doses.append(DoseRecord(choice, t, cfg.maintenance_dose))
            next_maint = s + int(round(cfg.maintenance_hours / dt))
        if s - first >= after_steps and s >= inf_end and cfg.escalation_rate > 0:
            frac = counts[s - lookback:s].sum() / (lookback * SEGMENTS_PER_STEP)
            if frac > cfg.escalation_threshold:
                rate[esc] = cfg.escalation_rate
                inf_end = s + esc_steps
                doses.append(DoseRecord(esc, t, cfg.escalation_rate * cfg.escalation_hours,
                                        cfg.escalation_hours))
        z = 1.0
        for d in (choice, esc):
            c0 = conc[d] + bolus[d]
            decay_half = math.exp(-lam[d] * dt / 2)
            gain_half = rate[d] / lam[d] * -math.expm1(-lam[d] * dt / 2)
            mid = c0 * decay_half + gain_half
            conc[d] = mid * decay_half + gain_half
            if mid > 0 and hill[d] > 0:
                z -= 1.0 / (1.0 + (ed50[d] / mid) ** hill[d])
        p = base[s] * min(1.0, max(0.0, z))
        p_step[s] = p
        counts[s] = np.count_nonzero(useg[s] < p)
    return counts, p_step, doses


def _contiguous_labels(counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-segment labels with each step's EA segments as one contiguous run."""
    out = np.zeros(counts.size * SEGMENTS_PER_STEP, dtype=np.int8)
    offsets = rng.random(counts.size)
    for s, c in enumerate(counts):
        if c:
            lo = s * SEGMENTS_PER_STEP + int(offsets[s] * (SEGMENTS_PER_STEP - c + 1))
            out[lo:lo + c] = 1
    return out


def stream_probabilities(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Noisy classifier-style probabilities for binary segment labels."""
    noise = rng.beta(2.0, 18.0, labels.size)
    return np.where(labels == 1, 1.0 - noise, noise)


@dataclass
class SimulationResult:
    cohort: Cohort
    truth: GroundTruth
    treated: np.ndarray
    e_max: np.ndarray
    segments: dict[str, np.ndarray] | None = None


def simulate(config: ScenarioConfig, keep_segments: bool = False) -> SimulationResult:
    config.validate()
    pot_eff = _potential_effects(config, E_MAX_EDGES if config.outcome_summary == "e_max"
                                 else E_MEAN_EDGES)
    pats = [_simulate_patient(config, i, pot_eff, keep_segments) for i in range(config.n_patients)]
    records = tuple(p.record for p in pats)
    cohort = Cohort(records, COVARIATES)
    analyzed = np.array([r.eeg_hours >= config.min_eeg_hours for r in records])
    truth = GroundTruth([r.id for r in records], np.array([p.cf_e_max for p in pats]),
                        np.array([p.cf_e_mean for p in pats]), np.array([p.cf_prob for p in pats]),
                        np.vstack([p.potential for p in pats]), analyzed, config.outcome_summary)
    res = SimulationResult(cohort, truth, np.array([p.treated for p in pats]),
                           np.array([p.e_max for p in pats]),
                           {p.record.id: p.segments for p in pats} if keep_segments else None)
    if config.require_confounding:
        check_confounding(res)
    return res


def generate_cohort(config: ScenarioConfig) -> tuple[Cohort, GroundTruth]:
    """Simulate a cohort; deterministic given ``config.seed``."""
    res = simulate(config)
    return res.cohort, res.truth


def naive_gaps(res: SimulationResult) -> np.ndarray:
    """Observed untreated-arm outcome mean minus true APO, per E_max level (nan if < 20 units)."""
    y = res.cohort.outcomes()
    level = bin_index(res.e_max, E_MAX_EDGES)
    mask = res.truth.analyzed & ~res.treated
    out = np.full(len(LEVELS), np.nan)
    for li in range(len(LEVELS)):
        sel = mask & (level == li)
        if sel.sum() >= 20 and not np.isnan(res.truth.potential[:, li]).any():
            out[li] = y[sel].mean() - true_apo(res.truth, "e_max", li)
    return out


def check_confounding(res: SimulationResult, margin: float = 0.05) -> None:
    gaps = naive_gaps(res)
    if np.all(np.isnan(gaps)):
        log.info("confounding check skipped: no untreated arm has 20 patients")
        return
    if not np.nanmax(np.abs(gaps)) > margin:
        raise ScenarioError(f"scenario is not confounded: naive gaps {np.round(gaps, 3).tolist()} "
                            f"all within {margin}")
