"""Stage-by-stage analysis run over a directory of CSV files.

Stages read their inputs from the run directory (or an input directory for
the raw cohort files) and write plain CSV outputs next to a single
``manifest.json``. Every output is a pure function of the config, the seed
and the input files, so repeated runs and different worker counts give
identical bytes.
"""
from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .baselines import naive_average, outcome_regression, propensity_match, multinomial_logistic
from .burden import (LEVELS, SEGMENT_SECONDS, bin_index, classify_treatment, mean_doses,
                     smooth_labels_hmm, step_fractions, window_fractions_from_counts)
from .cohort import (Cohort, CohortParseError, CovariateSchema, SchemaError, load_cohort,
                     write_doses)
from .config import Config, ConfigError
from .io import read_stream, write_csv, write_stream
from .matching import (MatchingSettings, MatchSpace, Metric, arm_code, contrast_interval,
                       fit_replicates, interval, match_groups, replicate_apo, subgroup_effects)
from .pkpd import DrugTable, PdParams, DrugPd, fit_pd_params, simulate_concentration
from .sensitivity import (debias_outcomes, mann_whitney_u, merge_sparse_bins, psi_sweep,
                          quantization_sweep)
from .simulator import COVARIATES, ScenarioConfig, ScenarioError, simulate, stream_probabilities

log = logging.getLogger(__name__)

STAGES = ("simulate", "fit-pd", "burden", "match", "estimate", "sensitivity", "baselines",
          "report")
N_ARMS = 2 * len(LEVELS)
RESERVED = ("id", "mrs", "weight_kg", "eeg_hours")


class MissingInputError(FileNotFoundError):
    pass


VALIDATION_ERRORS = (ConfigError, CohortParseError, SchemaError, ScenarioError, MissingInputError)


@dataclass
class Run:
    out: Path
    config: Config
    seed: int
    workers: int = 1
    input_dir: Path | None = None

    def path(self, name: str) -> Path:
        return self.out / name

    def source(self, name: str) -> Path:
        """Raw input file: the input directory wins, then the run directory."""
        if self.input_dir is not None and (self.input_dir / name).exists():
            return self.input_dir / name
        return self.out / name


def _patient_seed(seed: int, pid: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(pid.encode())) % (2 ** 63)


# ---------------------------------------------------------------- simulate

def stage_simulate(run: Run) -> list[str]:
    section = run.config.section("simulator")
    scenario = ScenarioConfig.from_config(section, run.seed)
    res = simulate(scenario, keep_segments=bool(section.get("write_streams", False)))
    cohort = res.cohort
    frame = cohort.to_frame()
    write_csv(frame, run.path("cohort.csv"))
    write_doses({p.id: list(p.doses) for p in cohort.patients}, run.path("doses.csv"))
    rows = []
    for p in cohort.patients:
        for s, (ne, nv) in enumerate(p.ea_counts):
            rows.append((p.id, s, int(ne), int(nv)))
    write_csv(pd.DataFrame(rows, columns=["patient_id", "step", "n_ea", "n_valid"]),
              run.path("ea_steps.csv"))
    write_csv(res.truth.frame(), run.path("ground_truth.csv"))
    write_csv(res.truth.arm_frame(), run.path("ground_truth_arms.csv"))
    outputs = ["cohort.csv", "doses.csv", "ea_steps.csv", "ground_truth.csv",
               "ground_truth_arms.csv"]
    if res.segments is not None:
        sdir = run.path("streams")
        sdir.mkdir(exist_ok=True)
        for i, (pid, labels) in enumerate(sorted(res.segments.items())):
            rng = np.random.default_rng([run.seed, i, 2])
            write_stream(stream_probabilities(labels, rng), sdir / f"{pid}.csv")
        outputs.append("streams/")
    return outputs


# ---------------------------------------------------------------- inputs

def _schema_from_csv(path: Path) -> CovariateSchema:
    df = pd.read_csv(path, nrows=5000)
    names = [c for c in df.columns if c not in RESERVED]
    if not names:
        raise SchemaError("cohort file has no covariate columns")
    kinds = []
    for c in names:
        vals = pd.to_numeric(df[c], errors="coerce").dropna().unique()
        kinds.append("binary" if len(vals) and set(vals) <= {0.0, 1.0} else "continuous")
    return CovariateSchema(tuple(names), tuple(kinds))


def load_inputs(run: Run) -> Cohort:
    need = ["cohort.csv", "doses.csv"]
    missing = [n for n in need if not run.source(n).exists()]
    if not run.source("ea_steps.csv").exists() and not run.source("streams").is_dir():
        missing.append("ea_steps.csv (or streams/)")
    if missing:
        raise MissingInputError(f"missing input files: {', '.join(missing)}")
    table = DrugTable.from_config(run.config)
    schema = _schema_from_csv(run.source("cohort.csv"))
    cohort = load_cohort(run.source("cohort.csv"), schema, run.source("doses.csv"),
                         drug_table=table, min_eeg_hours=float(run.config["burden.min_eeg_hours"]))
    patients = tuple(sorted(cohort.patients, key=lambda p: p.id))
    return Cohort(patients, schema, cohort.exclusions)


def step_counts(run: Run, cohort: Cohort) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-step (EA, valid) segment counts for every patient."""
    cfg = run.config
    step_min = float(cfg["burden.step_minutes"])
    horizon = float(cfg["burden.horizon_hours"])
    out = {}
    if run.source("ea_steps.csv").exists():
        df = pd.read_csv(run.source("ea_steps.csv"), dtype={"patient_id": str})
        for pid, g in df.groupby("patient_id", sort=True):
            g = g.sort_values("step")
            out[pid] = (g["n_ea"].to_numpy(float), g["n_valid"].to_numpy(float))
    else:
        transition = np.asarray(cfg["burden.transition"], dtype=float).reshape(2, 2)
        sdir = run.source("streams")
        for p in cohort.patients:
            path = sdir / f"{p.id}.csv"
            if not path.exists():
                continue
            labels, _ = smooth_labels_hmm(read_stream(path), transition)
            out[p.id] = step_fractions(labels, None, step_min, horizon)
    missing = [p.id for p in cohort.patients if p.id not in out]
    if missing:
        raise MissingInputError(f"no EA data for patients {missing[:5]}"
                                f"{' ...' if len(missing) > 5 else ''}")
    return out


# ---------------------------------------------------------------- fit-pd

def _fit_patient(args):
    pid, doses, n_ea, n_valid, step_h, table, pd_cfg, seed = args
    drugs = sorted({d.drug for d in doses})
    ok = n_valid > 0
    grid = (np.arange(n_ea.size) + 0.5) * step_h
    conc = simulate_concentration(doses, table, grid)
    frac = np.where(ok, n_ea / np.where(ok, n_valid, 1.0), 0.0)
    first = min(d.time for d in doses)
    pre = ok & ((np.arange(n_ea.size) + 1) * step_h <= first + 1e-9)
    baseline = frac[pre].mean() if pre.any() else (frac[ok].max() if ok.any() else 0.0)
    if baseline <= 0 or ok.sum() == 0:
        return pid, PdParams({d: DrugPd(1.0, table[d].default_ed50, "unidentifiable")
                              for d in drugs})
    values = {d: v[ok] for d, v in conc.values.items()}
    params = fit_pd_params(values, frac[ok], drugs, table, baseline=baseline,
                           n_starts=int(pd_cfg["n_starts"]), max_iter=int(pd_cfg["max_iter"]),
                           min_samples=int(pd_cfg["min_samples"]), seed=seed)
    return pid, params


def _map(fn, tasks, workers: int, chunksize: int = 8):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks, chunksize=chunksize))
    return [fn(t) for t in tasks]


def stage_fit_pd(run: Run) -> list[str]:
    cohort = load_inputs(run)
    steps = step_counts(run, cohort)
    table = DrugTable.from_config(run.config)
    step_h = float(run.config["burden.step_minutes"]) / 60.0
    pd_cfg = run.config.section("pd")
    tasks = [(p.id, p.doses, *steps[p.id], step_h, table, pd_cfg, _patient_seed(run.seed, p.id))
             for p in cohort.patients if p.doses]
    rows = []
    for pid, params in _map(_fit_patient, tasks, run.workers):
        for drug in sorted(params):
            d = params[drug]
            rows.append((pid, drug, d.hill_n, d.ed50, d.fit_status))
    write_csv(pd.DataFrame(rows, columns=["patient_id", "drug", "hill_n", "ed50", "status"]),
              run.path("pd_params.csv"))
    write_csv(cohort.exclusion_frame(), run.path("exclusions.csv"))
    return ["pd_params.csv", "exclusions.csv"]


def read_pd_params(path: Path) -> dict[str, PdParams]:
    df = pd.read_csv(path, dtype={"patient_id": str})
    out: dict[str, PdParams] = {}
    for row in df.itertuples(index=False):
        out.setdefault(row.patient_id, PdParams())[row.drug] = DrugPd(float(row.hill_n),
                                                                      float(row.ed50), row.status)
    return out


def median_ed50(fits: dict[str, PdParams], table: DrugTable) -> dict[str, float]:
    """Population median ED50 per drug over successful fits (table default if none)."""
    out = {}
    for drug in sorted(table):
        vals = [p[drug].ed50 for p in fits.values() if drug in p and p[drug].fit_status == "fitted"]
        if vals:
            out[drug] = float(np.median(vals))
        else:
            out[drug] = table[drug].default_ed50
    return out


# ---------------------------------------------------------------- burden

def stage_burden(run: Run) -> list[str]:
    _require(run, "pd_params.csv", "fit-pd")
    cohort = load_inputs(run)
    steps = step_counts(run, cohort)
    table = DrugTable.from_config(run.config)
    fits = read_pd_params(run.path("pd_params.csv"))
    medians = median_ed50(fits, table)
    cfg = run.config
    step_min = float(cfg["burden.step_minutes"])
    per_window = int(round(float(cfg["burden.window_hours"]) * 60 / step_min))
    horizon_steps = int(round(float(cfg["burden.horizon_hours"]) * 60 / step_min))
    max_art = float(cfg["burden.max_artifact_run_fraction"])
    seg_per_step = step_min * 60.0 / SEGMENT_SECONDS
    rows = []
    for p in cohort.patients:
        n_ea, n_valid = steps[p.id]
        eeg = p.eeg_hours if np.isfinite(p.eeg_hours) else n_ea.size * step_min / 60.0
        treated = classify_treatment(mean_doses(p.doses, eeg), medians)
        n_ea, n_valid = n_ea[:horizon_steps], n_valid[:horizon_steps]
        # too much artifact: fewer valid segments than the configured share
        bad = n_valid.sum() < (1.0 - max_art) * seg_per_step * n_valid.size
        if bad or not np.any(n_valid > 0):
            rows.append((p.id, math.nan, math.nan, math.nan, "", "", int(treated), 1))
            continue
        wf = window_fractions_from_counts(n_ea, n_valid, per_window, step_min / 60.0)
        e_max, e_mean = float(wf.fraction.max()), float(wf.fraction.mean())
        rows.append((p.id, e_max, e_mean, float(np.median(wf.fraction)),
                     LEVELS[int(bin_index(e_max, cfg["burden.e_max_edges"]))],
                     LEVELS[int(bin_index(e_mean, cfg["burden.e_mean_edges"]))], int(treated), 0))
    df = pd.DataFrame(rows, columns=["patient_id", "e_max", "e_mean", "e_median", "e_max_bin",
                                     "e_mean_bin", "treated", "excluded_artifact"])
    write_csv(df, run.path("burden.csv"))
    write_csv(pd.DataFrame(sorted(medians.items()), columns=["drug", "median_ed50"]),
              run.path("median_ed50.csv"))
    return ["burden.csv", "median_ed50.csv"]


# ---------------------------------------------------------------- analysis table

@dataclass
class Analysis:
    ids: list[str]
    space: MatchSpace
    covariate_names: list[str]
    binary: list[str]
    raw: np.ndarray  # unstandardized covariates
    y: np.ndarray
    e_max: np.ndarray
    e_mean: np.ndarray
    summary_value: np.ndarray
    levels: np.ndarray
    treated: np.ndarray
    arms: np.ndarray
    edges: tuple


def build_analysis(run: Run, edges=None) -> Analysis:
    _require(run, "burden.csv", "burden")
    cohort = load_inputs(run)
    fits = read_pd_params(run.path("pd_params.csv"))
    table = DrugTable.from_config(run.config)
    burden = pd.read_csv(run.path("burden.csv"), dtype={"patient_id": str}).set_index("patient_id")
    drugs = sorted({d for p in fits.values() for d in p})
    keep = [i for i, p in enumerate(cohort.patients)
            if p.id in burden.index and not burden.at[p.id, "excluded_artifact"]]
    cohort = Cohort(tuple(cohort.patients[i] for i in keep), cohort.schema, cohort.exclusions)
    ids = cohort.ids
    raw = cohort.covariate_matrix()
    pd_cols, pd_names = [], []
    for drug in drugs:
        n = np.array([fits.get(i, {}).get(drug, DrugPd(1.0, table[drug].default_ed50)).hill_n
                      for i in ids])
        ed = np.array([fits.get(i, {}).get(drug, DrugPd(1.0, table[drug].default_ed50)).ed50
                       for i in ids])
        pd_cols += [n, np.log(ed)]
        pd_names += [f"{drug}_hill_n", f"{drug}_log_ed50"]
    full = np.column_stack([raw] + pd_cols) if pd_cols else raw
    names = list(cohort.schema.names) + pd_names
    space = MatchSpace.from_raw(full, names, ids)
    summary = run.config["estimate.summary"]
    if summary not in ("e_max", "e_mean"):
        raise ConfigError("estimate.summary must be 'e_max' or 'e_mean'")
    b = burden.loc[ids]
    value = b[summary].to_numpy(float)
    if edges is None:
        edges = tuple(run.config[f"burden.{summary}_edges"])
    levels = bin_index(value, edges)
    treated = b["treated"].to_numpy(int)
    return Analysis(ids, space, list(cohort.schema.names), cohort.schema.binary(), raw,
                    cohort.outcomes().astype(float), b["e_max"].to_numpy(float),
                    b["e_mean"].to_numpy(float), value, levels, treated,
                    arm_code(levels, treated, len(LEVELS)), tuple(edges))


def settings_from(run: Run) -> MatchingSettings:
    s = MatchingSettings.from_config(run.config.section("matching"))
    s.n_boot = int(run.config["estimate.n_boot"])
    s.ci_levels = tuple(run.config["estimate.ci_levels"])
    return s


def d_prune_for(settings: MatchingSettings, space: MatchSpace) -> float:
    return float(space.p) if settings.d_prune is None else float(settings.d_prune)


# ---------------------------------------------------------------- match

def stage_match(run: Run) -> list[str]:
    a = build_analysis(run)
    s = settings_from(run)
    reps = fit_replicates(a.space, a.y, a.arms, N_ARMS, s, run.seed, run.workers)
    d_prune = d_prune_for(s, a.space)
    rows = [(r.index, name, float(w)) for r in reps
            for name, w in zip(a.space.names, r.metric.weights)]
    write_csv(pd.DataFrame(rows, columns=["replicate", "covariate", "weight"]),
              run.path("metrics.csv"))
    mean_w = np.mean([r.metric.weights for r in reps], axis=0)
    ranking = Metric(mean_w, a.space.names, math.nan).ranking
    write_csv(pd.DataFrame(ranking, columns=["covariate", "weight", "rank"]),
              run.path("weights.csv"))
    prune_rows = []
    with open(run.path("matched_groups.jsonl"), "w") as fh:
        for r in reps:
            ids = [a.ids[i] for i in r.est]
            groups = match_groups(r.metric, a.space.x[r.est], a.arms[r.est], ids, a.y[r.est],
                                  N_ARMS, s.k_per_arm)
            sizes = np.array([g.size for g in groups])
            diam = np.array([g.diameter for g in groups])
            prune_rows.append((r.index, len(groups), int(np.sum(diam > d_prune)),
                               int(np.sum(sizes < s.min_group_size)),
                               int(np.sum(sizes > s.max_group_size)),
                               int(sizes.min()), int(sizes.max()), float(np.median(diam))))
            if r.index == 0:
                for g in groups:
                    rec = {"replicate": 0, **g.to_json()}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    write_csv(pd.DataFrame(prune_rows, columns=["replicate", "groups", "pruned_diameter",
                                                "below_min_size", "above_max_size", "min_size",
                                                "max_size", "median_diameter"]),
              run.path("pruning.csv"))
    return ["metrics.csv", "weights.csv", "matched_groups.jsonl", "pruning.csv"]


def load_replicates(run: Run, a: Analysis, s: MatchingSettings):
    _require(run, "metrics.csv", "match")
    df = pd.read_csv(run.path("metrics.csv"))
    metrics = []
    for r in range(s.replicates):
        g = df[df["replicate"] == r].set_index("covariate")
        if g.empty:
            raise MissingInputError("metrics.csv does not match the configured replicates; "
                                    "re-run match")
        metrics.append(Metric(g.loc[list(a.space.names), "weight"].to_numpy(float),
                              a.space.names, math.nan))
    return fit_replicates(a.space, a.y, a.arms, N_ARMS, s, run.seed, run.workers, metric=metrics)


# ---------------------------------------------------------------- estimate

def _arm_rows(res, arms, s, stratum=0):
    rows = []
    for code in range(N_ARMS):
        level, treated = LEVELS[code % len(LEVELS)], code // len(LEVELS)
        point = float(res.estimates[stratum, code])
        lo, hi = interval(point, None if res.boot is None else res.boot[:, stratum, code],
                          s.ci_levels)
        rows.append((level, treated, point, lo, hi, int(np.sum(arms == code))))
    return rows


def stage_estimate(run: Run) -> list[str]:
    a = build_analysis(run)
    s = settings_from(run)
    reps = load_replicates(run, a, s)
    d_prune = d_prune_for(s, a.space)
    res = replicate_apo(reps, a.y, N_ARMS, s, d_prune, n_boot=s.n_boot, seed=run.seed,
                        workers=run.workers)
    if np.all(res.pruned == res.groups_total):
        raise ValueError(f"all matched groups exceed d_prune={d_prune}; use a larger d_prune")
    df = pd.DataFrame(_arm_rows(res, a.arms, s),
                      columns=["arm_burden", "arm_treated", "estimate", "ci_low", "ci_high", "n"])
    write_csv(df, run.path("apo.csv"))
    top = len(LEVELS) - 1
    crow = []
    for t in (0, 1):
        point, lo, hi = contrast_interval(res, top + 4 * t, 4 * t, 0, s.ci_levels)
        crow.append((f"{LEVELS[top]} - {LEVELS[0]}", t, point, lo, hi))
    write_csv(pd.DataFrame(crow, columns=["contrast", "arm_treated", "estimate", "ci_low",
                                          "ci_high"]), run.path("contrasts.csv"))
    srows = []
    for name in run.config["estimate.subgroups"]:
        if name not in a.binary:
            log.warning("subgroup %r is not a binary covariate; skipped", name)
            continue
        flag = a.raw[:, a.covariate_names.index(name)]
        eff = subgroup_effects(reps, a.y, flag, N_ARMS, s, d_prune, top, 0, n_boot=s.n_boot,
                               seed=run.seed, workers=run.workers)
        for stratum in ("present", "absent"):
            v = eff[stratum]
            if v is None:
                srows.append((name, stratum, math.nan, math.nan, math.nan, 0, 0))
            else:
                srows.append((name, stratum, v[0], v[1], v[2], v[3], 1))
    write_csv(pd.DataFrame(srows, columns=["covariate", "stratum", "contrast", "ci_low",
                                           "ci_high", "n", "available"]),
              run.path("subgroups.csv"))
    return ["apo.csv", "contrasts.csv", "subgroups.csv"]


# ---------------------------------------------------------------- sensitivity

def stage_sensitivity(run: Run) -> list[str]:
    a = build_analysis(run)
    s = settings_from(run)
    cfg = run.config
    reps = load_replicates(run, a, s)
    d_prune = d_prune_for(s, a.space)
    n_boot = int(cfg["sensitivity.n_boot"])
    top = len(LEVELS) - 1

    # selection-bias debiasing over psi
    prob = multinomial_logistic(a.space.x, a.levels, len(LEVELS))
    own = prob[np.arange(a.y.size), a.levels]
    sweep = psi_sweep(reps, a.y, a.summary_value, own, cfg["sensitivity.psi_grid"], N_ARMS, s,
                      d_prune, n_boot=n_boot, seed=run.seed, workers=run.workers)
    rows, crow = [], []
    for psi, res in sweep.items():
        for r in _arm_rows(res, a.arms, s):
            rows.append((psi,) + r[:5])
        point, lo, hi = contrast_interval(res, top, 0, 0, s.ci_levels)
        crow.append((psi, point, lo, hi, int(lo > 0 or hi < 0)))
    write_csv(pd.DataFrame(rows, columns=["psi", "arm_burden", "arm_treated", "estimate",
                                          "ci_low", "ci_high"]), run.path("sensitivity_psi.csv"))
    write_csv(pd.DataFrame(crow, columns=["psi", "contrast", "ci_low", "ci_high", "significant"]),
              run.path("sensitivity_psi_contrast.csv"))

    # quantization sweep over (rho1, rho2)
    base_metrics = [r.metric for r in reps] if cfg["sensitivity.reuse_metric"] else None
    surface = quantization_sweep(a.space, a.y, a.summary_value, a.treated, s, run.seed,
                                 cfg["sensitivity.rho1_grid"], cfg["sensitivity.rho2_grid"],
                                 base_metrics=base_metrics, workers=run.workers)
    qrows = []
    for (r1, r2), res in surface.items():
        for code in range(N_ARMS):
            est = math.nan if res is None else float(res.estimates[0, code])
            qrows.append((r1, r2, LEVELS[code % 4], code // 4, est, int(res is not None)))
    write_csv(pd.DataFrame(qrows, columns=["rho1", "rho2", "arm_burden", "arm_treated",
                                           "estimate", "available"]),
              run.path("quantization_surface.csv"))

    write_csv(granular_table(run, a, s, reps, n_boot), run.path("granular_bins.csv"))
    write_csv(missingness_table(run), run.path("mwu.csv"))
    return ["sensitivity_psi.csv", "sensitivity_psi_contrast.csv", "quantization_surface.csv",
            "granular_bins.csv", "mwu.csv"]


def granular_table(run: Run, a: Analysis, s: MatchingSettings, base_reps, n_boot: int):
    """APO per fine E_max bin (under-populated bins merged), with 4-bin CI comparison."""
    cfg = run.config
    fine = list(cfg["sensitivity.granular_edges"])
    fine_level = bin_index(a.summary_value, fine)
    counts = [int(np.sum((fine_level == b) & (a.treated == 0))) for b in range(len(fine) + 1)]
    edges, groups = merge_sparse_bins(fine, counts, int(cfg["sensitivity.min_bin_count"]))
    nb = len(edges) + 1
    levels = bin_index(a.summary_value, edges)
    arms = levels + nb * a.treated
    reps = fit_replicates(a.space, a.y, arms, 2 * nb, s, run.seed, run.workers)
    d_prune = d_prune_for(s, a.space)
    res = replicate_apo(reps, a.y, 2 * nb, s, d_prune, n_boot=n_boot, seed=run.seed,
                        workers=run.workers)
    base = replicate_apo(base_reps, a.y, N_ARMS, s, d_prune, n_boot=n_boot, seed=run.seed,
                         workers=run.workers)
    naive = naive_average(a.y, arms, 2 * nb, s.replicates, s.train_fraction, run.seed)
    bounds = [0.0] + list(edges) + [1.0]
    rows = []
    for t in (0, 1):
        for b in range(nb):
            code = b + nb * t
            point = float(res.estimates[0, code])
            lo, hi = interval(point, None if res.boot is None else res.boot[:, 0, code],
                              s.ci_levels)
            # widest 4-bin arm overlapping this fine bin
            coarse = sorted(set(bin_index([bounds[b], min(bounds[b + 1], 1.0) - 1e-12], a.edges)))
            widths = []
            for c in range(coarse[0], coarse[-1] + 1):
                cp = float(base.estimates[0, c + 4 * t])
                clo, chi = interval(cp, None if base.boot is None else base.boot[:, 0, c + 4 * t],
                                    s.ci_levels)
                widths.append(chi - clo)
            base_w = max(widths) if widths else math.nan
            rows.append((f"[{bounds[b]:g},{bounds[b + 1]:g}{']' if b == nb - 1 else ')'}",
                         bounds[b], bounds[b + 1], t, point, lo, hi,
                         float(naive.estimate[code]), int(np.sum(arms == code)),
                         "+".join(str(g) for g in groups[b]), int((hi - lo) > base_w)))
    return pd.DataFrame(rows, columns=["bin", "lo", "hi", "arm_treated", "estimate", "ci_low",
                                       "ci_high", "naive", "n", "fine_bins", "wider_than_4bin"])


def missingness_table(run: Run) -> pd.DataFrame:
    """Included vs excluded (recording < min hours) patients, per continuous covariate."""
    df = pd.read_csv(run.source("cohort.csv"), dtype={"id": str})
    if "eeg_hours" not in df.columns:
        return pd.DataFrame(columns=["covariate", "n_included", "n_excluded", "u", "p_value"])
    short = df["eeg_hours"] < float(run.config["burden.min_eeg_hours"])
    schema = _schema_from_csv(run.source("cohort.csv"))
    rows = []
    for name, kind in zip(schema.names, schema.kinds):
        if kind != "continuous":
            continue
        inc = df.loc[~short, name].dropna().to_numpy(float)
        exc = df.loc[short, name].dropna().to_numpy(float)
        if inc.size and exc.size:
            u, p = mann_whitney_u(inc, exc)
        else:
            u, p = math.nan, math.nan
        rows.append((name, inc.size, exc.size, u, p))
    return pd.DataFrame(rows, columns=["covariate", "n_included", "n_excluded", "u", "p_value"])


# ---------------------------------------------------------------- baselines

def stage_baselines(run: Run) -> list[str]:
    a = build_analysis(run)
    s = settings_from(run)
    naive = naive_average(a.y, a.arms, N_ARMS, s.replicates, s.train_fraction, run.seed)
    reg, _ = outcome_regression(a.raw, a.y, a.levels, a.treated, len(LEVELS))
    prop = propensity_match(a.space.x, a.y, a.arms, N_ARMS)
    rows = []
    for code in range(N_ARMS):
        level, t = LEVELS[code % 4], code // 4
        rows.append(("naive", level, t, naive.estimate[code], naive.spread[code]))
    for code in range(N_ARMS):
        rows.append(("outcome_regression", LEVELS[code % 4], code // 4, reg[code], math.nan))
    for code in range(N_ARMS):
        rows.append(("propensity_match", LEVELS[code % 4], code // 4, prop[code], math.nan))
    write_csv(pd.DataFrame(rows, columns=["method", "arm_burden", "arm_treated", "estimate",
                                          "spread"]), run.path("baselines.csv"))
    return ["baselines.csv"]


# ---------------------------------------------------------------- report

REPORT_INPUTS = ("apo.csv", "contrasts.csv", "weights.csv", "pruning.csv", "subgroups.csv",
                 "sensitivity_psi.csv", "sensitivity_psi_contrast.csv",
                 "quantization_surface.csv", "baselines.csv", "granular_bins.csv", "mwu.csv")


def _table(df: pd.DataFrame) -> str:
    cols = list(df.columns)
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for row in df.itertuples(index=False):
        cells = [f"{v:.4g}" if isinstance(v, float) else str(v) for v in row]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def stage_report(run: Run) -> list[str]:
    if not run.path("manifest.json").exists():
        raise MissingInputError(f"{run.out} is not a run directory (no manifest.json)")
    have = {n: pd.read_csv(run.path(n)) for n in REPORT_INPUTS if run.path(n).exists()}
    if not have:
        raise MissingInputError("run directory holds no stage outputs to report on")
    missing = [n for n in REPORT_INPUTS if n not in have]
    md = ["# Analysis report", ""]
    agg: dict = {"missing": missing}
    outputs = ["report.md", "report.json"]
    if "apo.csv" in have:
        apo = have["apo.csv"]
        md += ["## Probability of a poor outcome by arm", "", _table(apo), ""]
        agg["apo"] = apo.to_dict(orient="records")
        write_csv(apo[["arm_burden", "arm_treated", "estimate", "ci_low", "ci_high"]],
                  run.path("plot_apo_by_arm.csv"))
        outputs.append("plot_apo_by_arm.csv")
    if "contrasts.csv" in have:
        md += ["## Contrasts", "", _table(have["contrasts.csv"]), ""]
        agg["contrasts"] = have["contrasts.csv"].to_dict(orient="records")
    if "weights.csv" in have:
        w = have["weights.csv"].sort_values("rank")
        md += ["## Covariate importance (learnt metric weights)", "", _table(w), ""]
        agg["weights"] = w.to_dict(orient="records")
        write_csv(w[["rank", "covariate", "weight"]], run.path("plot_weight_ranking.csv"))
        outputs.append("plot_weight_ranking.csv")
    if "pruning.csv" in have:
        pr = have["pruning.csv"]
        md += ["## Matched groups and pruning", "", _table(pr), ""]
        agg["pruned_total"] = int(pr["pruned_diameter"].sum())
    if "subgroups.csv" in have:
        md += ["## Subgroup contrasts", "", _table(have["subgroups.csv"]), ""]
        agg["subgroups"] = have["subgroups.csv"].to_dict(orient="records")
    if "sensitivity_psi.csv" in have:
        sp = have["sensitivity_psi.csv"]
        write_csv(sp[sp["arm_treated"] == 0][["psi", "arm_burden", "estimate", "ci_low",
                                              "ci_high"]], run.path("plot_psi_sweep.csv"))
        outputs.append("plot_psi_sweep.csv")
    if "sensitivity_psi_contrast.csv" in have:
        pc = have["sensitivity_psi_contrast.csv"]
        sig = pc[pc["significant"] == 1]["psi"]
        rng = [float(sig.min()), float(sig.max())] if len(sig) else None
        md += ["## Selection-bias sensitivity", "", _table(pc), "",
               f"Contrast significant for psi in {rng}." if rng else
               "Contrast not significant for any psi in the grid.", ""]
        agg["psi_significant_range"] = rng
    if "quantization_surface.csv" in have:
        q = have["quantization_surface.csv"]
        qu = q[q["arm_treated"] == 0]
        write_csv(qu[["rho1", "rho2", "arm_burden", "estimate"]],
                  run.path("plot_quantization_surface.csv"))
        outputs.append("plot_quantization_surface.csv")
        ranges = {lvl: [float(qu[qu["arm_burden"] == lvl]["estimate"].min()),
                        float(qu[qu["arm_burden"] == lvl]["estimate"].max())] for lvl in LEVELS}
        md += ["## Bin-edge sensitivity (untreated arms, min..max over grid)", ""]
        md += [f"- {lvl}: {lo:.4g} .. {hi:.4g}" for lvl, (lo, hi) in ranges.items()] + [""]
        agg["quantization_ranges"] = ranges
    if "granular_bins.csv" in have:
        md += ["## Finer E_max bins", "", _table(have["granular_bins.csv"]), ""]
    if "baselines.csv" in have:
        md += ["## Baseline estimators", "", _table(have["baselines.csv"]), ""]
        agg["baselines"] = have["baselines.csv"].to_dict(orient="records")
    if "mwu.csv" in have:
        md += ["## Excluded vs included patients (Mann-Whitney U)", "", _table(have["mwu.csv"]),
               ""]
    if missing:
        md += ["## Missing stage outputs", ""] + [f"- {m}" for m in missing] + [""]
    run.path("report.md").write_text("\n".join(md))
    run.path("report.json").write_text(json.dumps(_clean(agg), indent=1, sort_keys=True) + "\n")
    return outputs


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if not math.isfinite(v) else float(f"{v:.10g}")
    return obj


# ---------------------------------------------------------------- driver

STAGE_FUNCS = {
    "simulate": stage_simulate,
    "fit-pd": stage_fit_pd,
    "burden": stage_burden,
    "match": stage_match,
    "estimate": stage_estimate,
    "sensitivity": stage_sensitivity,
    "baselines": stage_baselines,
    "report": stage_report,
}
UPSTREAM = {
    "fit-pd": [],
    "burden": ["fit-pd"],
    "match": ["burden"],
    "estimate": ["match"],
    "sensitivity": ["match"],
    "baselines": ["burden"],
}
PRODUCES = {"fit-pd": "pd_params.csv", "burden": "burden.csv", "match": "metrics.csv"}


def _require(run: Run, name: str, stage: str) -> None:
    """Run ``stage`` (and its upstream stages) when ``name`` is missing."""
    if not run.path(name).exists():
        log.info("%s missing; running %s first", name, stage)
        for up in UPSTREAM.get(stage, []):
            _require(run, PRODUCES[up], up)
        _record(run, stage, STAGE_FUNCS[stage](run))


def _record(run: Run, stage: str, outputs: list[str]) -> None:
    path = run.path("manifest.json")
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update({
        "package_version": __version__,
        "config_digest": run.config.digest(),
        "seed": run.seed,
        "subcommand": stage,
        "output_dir": run.out.name,
        "config": {k: v for k, v in sorted(run.config.items())},
    })
    stages = manifest.setdefault("stages", {})
    stages[stage] = {"outputs": sorted(outputs),
                     "input_dir": None if run.input_dir is None else run.input_dir.name}
    manifest["stages"] = dict(sorted(stages.items()))
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")


def run_stage(run: Run, stage: str) -> list[str]:
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown subcommand {stage!r}")
    run.out.mkdir(parents=True, exist_ok=True)
    if stage == "report":
        return stage_report(run)
    outputs = STAGE_FUNCS[stage](run)
    _record(run, stage, outputs)
    return outputs
