"""Flat ``section.key = value`` configuration files.

A config file is plain text, one assignment per line::

    # comments start with '#'
    matching.k = 10
    estimate.summary = "e_max"
    sensitivity.psi_grid = [-1.0, -0.5, 0.0, 0.5, 1.0]

Values are Python literals (numbers, quoted strings, lists, booleans).
Unknown keys are rejected so that typos do not silently fall back to
defaults.
"""
from __future__ import annotations

import ast
import hashlib
import json
from pathlib import Path
from typing import Any

from .pkpd import DEFAULT_DRUG_TABLE


class ConfigError(ValueError):
    """Raised for unparsable or unknown configuration entries."""


def _drug_defaults() -> dict[str, Any]:
    out = {}
    for name, spec in DEFAULT_DRUG_TABLE.items():
        out[f"drugs.{name}.half_life_hours"] = spec.half_life_hours
        out[f"drugs.{name}.default_ed50"] = spec.default_ed50
    return out


DEFAULTS: dict[str, Any] = {
    "seed": 20240521,
    # burden
    "burden.window_hours": 6.0,
    "burden.step_minutes": 10.0,
    "burden.horizon_hours": 24.0,
    "burden.min_eeg_hours": 2.0,
    "burden.e_max_edges": [0.25, 0.5, 0.75],
    "burden.e_mean_edges": [0.02, 0.1, 0.3],
    "burden.transition": [0.98, 0.02, 0.02, 0.98],
    "burden.max_artifact_run_fraction": 0.30,
    # pk/pd fitting
    "pd.n_starts": 4,
    "pd.max_iter": 500,
    "pd.min_samples": 10,
    # matching
    "matching.k": 10,
    "matching.k_per_arm": 5,
    "matching.l1": 0.01,
    "matching.restarts": 8,
    "matching.max_evals": 400,
    "matching.replicates": 15,
    "matching.train_fraction": 2.0 / 3.0,
    "matching.d_prune": "p",
    "matching.min_group_size": 6,
    "matching.max_group_size": 40,
    # estimation
    "estimate.summary": "e_max",
    "estimate.n_boot": 1000,
    "estimate.ci_levels": [2.5, 97.5],
    "estimate.subgroups": ["hie", "abi"],
    # sensitivity
    "sensitivity.psi_grid": [-1.0, -0.5, 0.0, 0.5, 1.0],
    "sensitivity.rho1_grid": [0.1, 0.25, 0.4],
    "sensitivity.rho2_grid": [0.6, 0.75, 0.9],
    "sensitivity.granular_edges": [0.1, 0.25, 0.5, 0.75, 0.9],
    "sensitivity.min_bin_count": 10,
    "sensitivity.reuse_metric": False,
    "sensitivity.n_boot": 200,
    # simulator
    "simulator.scenario": "default",
    "simulator.n_patients": 600,
    "simulator.write_streams": False,
    "simulator.short_eeg_fraction": 0.02,
}
DEFAULTS.update(_drug_defaults())


def _parse_value(raw: str, lineno: int) -> Any:
    raw = raw.strip()
    if raw in ("true", "false"):
        return raw == "true"
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        raise ConfigError(f"line {lineno}: cannot parse value {raw!r}") from None


def parse_config_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(line).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip()
        if not key or any(ch.isspace() for ch in key):
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        out[key] = _parse_value(raw, lineno)
    return out


def _strip_comment(line: str) -> str:
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


class Config(dict):
    """Flat mapping of dotted keys, pre-populated with defaults."""

    @classmethod
    def load(cls, path: str | Path | None = None,
             overrides: dict[str, Any] | None = None) -> "Config":
        cfg = cls(DEFAULTS)
        if path is not None:
            user = parse_config_text(Path(path).read_text())
            cfg.update_checked(user)
        cfg.update_checked(overrides or {})
        return cfg

    def update_checked(self, values: dict[str, Any]) -> None:
        for key, value in values.items():
            if key not in DEFAULTS and not key.startswith(("simulator.", "drugs.")):
                raise ConfigError(f"unknown config key {key!r}")
            self[key] = value

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)}

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.items()))

    def digest(self) -> str:
        blob = json.dumps(dict(sorted(self.items())), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)
