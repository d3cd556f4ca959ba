"""Patient cohort data model, CSV ingestion and covariate standardization."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .pkpd import DEFAULT_DRUG_TABLE, DoseRecord


class CohortParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered covariate names with their kind (``continuous`` or ``binary``)."""

    names: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) == 0:
            raise SchemaError("schema needs at least one covariate")
        if len(self.names) != len(self.kinds):
            raise SchemaError("names and kinds differ in length")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("duplicate covariate names")
        bad = set(self.kinds) - {"continuous", "binary"}
        if bad:
            raise SchemaError(f"unknown covariate kinds {sorted(bad)}")

    @classmethod
    def from_mapping(cls, kinds: Mapping[str, str]) -> "CovariateSchema":
        return cls(tuple(kinds), tuple(kinds.values()))

    @property
    def p(self) -> int:
        return len(self.names)

    def binary(self) -> list[str]:
        return [n for n, k in zip(self.names, self.kinds) if k == "binary"]


@dataclass(frozen=True)
class PatientRecord:
    id: str
    covariates: np.ndarray
    outcome_mrs: int
    body_weight_kg: float
    doses: tuple[DoseRecord, ...] = ()
    eeg_hours: float = math.nan
    ea_stream: object | None = None  # EaProbabilityStream when loaded
    ea_counts: np.ndarray | None = None  # (n_steps, 2) EA / valid segment counts per step


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    sd: np.ndarray
    zero_variance: np.ndarray


@dataclass(frozen=True)
class Cohort:
    patients: tuple[PatientRecord, ...]
    schema: CovariateSchema
    exclusions: tuple[tuple[str, str], ...] = ()
    stats: StandardizationStats | None = None

    def __len__(self) -> int:
        return len(self.patients)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.patients]

    def covariate_matrix(self) -> np.ndarray:
        if not self.patients:
            return np.zeros((0, self.schema.p))
        return np.vstack([p.covariates for p in self.patients])

    def outcomes(self) -> np.ndarray:
        return np.array([dichotomize_outcome(p.outcome_mrs) for p in self.patients], dtype=int)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.covariate_matrix(), columns=list(self.schema.names))
        df.insert(0, "eeg_hours", [p.eeg_hours for p in self.patients])
        df.insert(0, "weight_kg", [p.body_weight_kg for p in self.patients])
        df.insert(0, "mrs", [p.outcome_mrs for p in self.patients])
        df.insert(0, "id", self.ids)
        return df

    def summary(self) -> str:
        """Canonical text summary, stable across a write/read round trip."""
        buf = io.StringIO()
        self.to_frame().to_csv(buf, index=False, float_format="%.12g", lineterminator="\n")
        buf.write("# excluded\n")
        for pid, reason in self.exclusions:
            buf.write(f"{pid},{reason}\n")
        return buf.getvalue()

    def exclusion_frame(self) -> pd.DataFrame:
        return pd.DataFrame(list(self.exclusions), columns=["id", "reason"])


def dichotomize_outcome(mrs: int) -> int:
    """1 (poor) for mRS >= 4, else 0."""
    if isinstance(mrs, (bool, np.bool_)) or int(mrs) != mrs or not 0 <= mrs <= 6:
        raise ValueError(f"mRS must be an integer in 0..6, got {mrs!r}")
    return int(mrs >= 4)


def read_doses(path: str | Path, drug_table: Mapping | None = None) -> dict[str, list[DoseRecord]]:
    """Doses CSV ``patient_id, drug, start_hr, duration_hr, dose_mg_per_kg``.

    ``dose_mg_per_kg`` is the total amount; ``duration_hr == 0`` is a bolus.
    """
    table = drug_table if drug_table is not None else DEFAULT_DRUG_TABLE
    out: dict[str, list[DoseRecord]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"patient_id", "drug", "start_hr", "duration_hr", "dose_mg_per_kg"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise CohortParseError(f"doses file needs columns {sorted(need)}", 1)
        for row in reader:
            line = reader.line_num
            drug = row["drug"].strip()
            if drug not in table:
                raise SchemaError(f"line {line}: unknown drug {drug!r}")
            try:
                rec = DoseRecord(drug, float(row["start_hr"]), float(row["dose_mg_per_kg"]),
                                 float(row["duration_hr"]))
            except (TypeError, ValueError) as exc:
                raise CohortParseError(str(exc), line) from None
            out.setdefault(row["patient_id"].strip(), []).append(rec)
    for recs in out.values():
        recs.sort(key=lambda d: (d.time, d.drug))
    return out


def write_doses(doses: Mapping[str, Sequence[DoseRecord]], path: str | Path) -> None:
    rows = [(pid, d.drug, d.time, d.duration, d.amount)
            for pid in sorted(doses) for d in doses[pid]]
    df = pd.DataFrame(rows, columns=["patient_id", "drug", "start_hr", "duration_hr", "dose_mg_per_kg"])
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def _parse_float(value: str, line: int, column: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise CohortParseError(f"column {column!r}: not a number: {value!r}", line) from None


def load_cohort(path: str | Path, schema: CovariateSchema, doses_path: str | Path | None = None,
                streams_dir: str | Path | None = None, drug_table: Mapping | None = None,
                min_eeg_hours: float = 2.0) -> Cohort:
    """Read a cohort CSV (``id, mrs, weight_kg, [eeg_hours,] <covariates>``).

    Rows that violate an invariant are not errors: they go to the exclusion
    report with a reason code (``missing_outcome``, ``invalid_mrs``,
    ``invalid_weight``, ``missing_covariate``, ``eeg<2h``). Structural problems
    (unreadable numbers, missing columns) raise :class:`CohortParseError`.
    """
    doses = read_doses(doses_path, drug_table) if doses_path is not None else {}
    patients: list[PatientRecord] = []
    excluded: list[tuple[str, str]] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in ("id", "mrs", "weight_kg", *schema.names) if c not in cols]
        if missing:
            raise CohortParseError(f"missing columns {missing}", 1)
        for row in reader:
            line = reader.line_num
            if None in row or any(v is None for v in row.values()):
                raise CohortParseError("wrong number of fields", line)
            pid = row["id"].strip()
            if not pid:
                raise CohortParseError("empty id", line)
            mrs_raw = row["mrs"].strip()
            if mrs_raw == "":
                excluded.append((pid, "missing_outcome"))
                continue
            mrs = _parse_float(mrs_raw, line, "mrs")
            if mrs != int(mrs) or not 0 <= mrs <= 6:
                excluded.append((pid, "invalid_mrs"))
                continue
            weight = _parse_float(row["weight_kg"], line, "weight_kg") if row["weight_kg"].strip() \
                else math.nan
            if not weight > 0:
                excluded.append((pid, "invalid_weight"))
                continue
            raw = [row[c].strip() for c in schema.names]
            if any(v == "" for v in raw):
                excluded.append((pid, "missing_covariate"))
                continue
            values = np.array([_parse_float(v, line, c) for v, c in zip(raw, schema.names)])
            if not np.all(np.isfinite(values)):
                excluded.append((pid, "missing_covariate"))
                continue
            eeg_hours = math.nan
            if "eeg_hours" in cols and row["eeg_hours"].strip():
                eeg_hours = _parse_float(row["eeg_hours"], line, "eeg_hours")
            stream = None
            if streams_dir is not None:
                from .io import read_stream

                stream_path = Path(streams_dir) / f"{pid}.csv"
                if stream_path.exists():
                    stream = read_stream(stream_path)
                    eeg_hours = stream.duration_hours
            if eeg_hours < min_eeg_hours:
                excluded.append((pid, "eeg<2h"))
                continue
            patients.append(PatientRecord(pid, values, int(mrs), weight,
                                          tuple(doses.get(pid, ())), eeg_hours, stream))
    return Cohort(tuple(patients), schema, tuple(excluded))


def write_cohort(cohort: Cohort, path: str | Path) -> None:
    cohort.to_frame().to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def standardize_matrix(x: np.ndarray) -> tuple[np.ndarray, StandardizationStats]:
    """Column z-scores with the (n-1) sample standard deviation.

    Zero-variance columns are flagged and returned as zeros.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 rows to standardize")
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    if not np.all(np.isfinite(sd)):
        raise ValueError("non-finite standard deviation")
    zero = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    safe_sd = np.where(zero, 1.0, sd)
    z = (x - mean) / safe_sd
    z[:, zero] = 0.0
    return z, StandardizationStats(mean, safe_sd, zero)


def standardize(cohort: Cohort) -> Cohort:
    """Z-score every covariate (binary flags included).

    Standardizing an already standardized cohort composes the stored
    statistics, so the inverse transform still maps back to raw units.
    """
    z, stats = standardize_matrix(cohort.covariate_matrix())
    if cohort.stats is not None:
        prev = cohort.stats
        stats = StandardizationStats(prev.mean + prev.sd * stats.mean, prev.sd * stats.sd,
                                     prev.zero_variance | stats.zero_variance)
    patients = tuple(replace(p, covariates=z[i]) for i, p in enumerate(cohort.patients))
    return replace(cohort, patients=patients, stats=stats)


def unstandardize(cohort: Cohort) -> np.ndarray:
    if cohort.stats is None:
        return cohort.covariate_matrix()
    return cohort.covariate_matrix() * cohort.stats.sd + cohort.stats.mean
