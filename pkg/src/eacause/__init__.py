"""Causal effect of epileptiform-activity burden on outcome, by learnt-metric matching."""

__version__ = "0.1.0"

from .burden import LEVELS, smooth_labels_hmm, window_fractions_from_counts  # noqa: E402
from .cohort import Cohort, CovariateSchema, PatientRecord, load_cohort  # noqa: E402
from .config import Config, ConfigError  # noqa: E402
from .matching import (MatchingSettings, MatchSpace, Metric, estimate_apo,  # noqa: E402
                       learn_metric, match_groups)
from .pkpd import DoseRecord, DrugTable, fit_pd_params, simulate_concentration  # noqa: E402
from .simulator import ScenarioConfig, generate_cohort, simulate, true_apo  # noqa: E402
