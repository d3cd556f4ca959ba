"""EA probability streams to burden summaries.

The chain is: per-2-second EA probabilities -> HMM-smoothed binary labels
-> artifact-masked EA fraction over 6-hour windows sliding in 10-minute
steps across the first 24 hours -> (E_max, E_mean) -> 4-level bins.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

SEGMENT_SECONDS = 2.0
ARTIFACT_WINDOW_SECONDS = 10.0
SEGMENTS_PER_ARTIFACT_WINDOW = int(ARTIFACT_WINDOW_SECONDS / SEGMENT_SECONDS)

LEVELS = ("mild", "moderate", "severe", "very severe")
E_MAX_EDGES = (0.25, 0.5, 0.75)
E_MEAN_EDGES = (0.02, 0.1, 0.3)


@dataclass(frozen=True)
class EaProbabilityStream:
    p_ea: np.ndarray
    start_time: float = 0.0  # seconds

    def __post_init__(self):
        p = np.asarray(self.p_ea, dtype=float)
        if p.ndim != 1:
            raise ValueError("p_ea must be one-dimensional")
        if np.any((p < 0) | (p > 1)) or np.any(~np.isfinite(p)):
            raise ValueError("p_ea values must lie in [0, 1]")
        object.__setattr__(self, "p_ea", p)

    @property
    def duration_hours(self) -> float:
        return self.p_ea.size * SEGMENT_SECONDS / 3600.0

    @classmethod
    def from_pairs(cls, t_seconds: Sequence[float], p_ea: Sequence[float]) -> "EaProbabilityStream":
        t = np.asarray(t_seconds, dtype=float)
        if t.size > 1 and not np.allclose(np.diff(t), SEGMENT_SECONDS):
            raise ValueError("EA stream must have a 2-second cadence")
        return cls(np.asarray(p_ea, dtype=float), float(t[0]) if t.size else 0.0)


@dataclass(frozen=True)
class ArtifactMask:
    flags: np.ndarray  # one boolean per 10-second window
    longest_run_fraction: float
    exclude: bool

    def segment_mask(self, n_segments: int) -> np.ndarray:
        seg = np.repeat(self.flags, SEGMENTS_PER_ARTIFACT_WINDOW)
        if seg.size < n_segments:
            seg = np.concatenate([seg, np.zeros(n_segments - seg.size, dtype=bool)])
        return seg[:n_segments]


def _longest_run(flags: np.ndarray) -> int:
    best = run = 0
    for f in flags:
        run = run + 1 if f else 0
        best = max(best, run)
    return best


def detect_artifacts(total_power: Sequence[float], psd_slope: Sequence[float],
                     max_run_fraction: float = 0.30) -> ArtifactMask:
    """Flag 10-second windows whose power or spectral slope is an extreme outlier.

    A window is an artifact when its total power is below Q1 - 3 IQR or above
    Q3 + 3 IQR, or its log-PSD slope exceeds Q3 + 3 IQR of all slopes.
    ``exclude`` is set when the longest consecutive artifact run is longer
    than ``max_run_fraction`` of the recording.
    """
    power = np.asarray(total_power, dtype=float)
    slope = np.asarray(psd_slope, dtype=float)
    if power.shape != slope.shape or power.ndim != 1:
        raise ValueError("power and slope must be 1-D and aligned")
    if power.size < 4:
        raise ValueError("need at least 4 windows to compute quartiles")
    q1, q3 = np.percentile(power, [25, 75])
    iqr = q3 - q1
    s1, s3 = np.percentile(slope, [25, 75])
    flags = (power < q1 - 3 * iqr) | (power > q3 + 3 * iqr) | (slope > s3 + 3 * (s3 - s1))
    frac = _longest_run(flags) / flags.size
    return ArtifactMask(flags, frac, frac > max_run_fraction)


def _check_transition(transition) -> np.ndarray:
    a = np.asarray(transition, dtype=float).reshape(2, 2)
    if np.any(a < 0):
        raise ValueError("transition probabilities must be non-negative")
    if np.any(a.sum(axis=1) == 0):
        raise ValueError("degenerate transition matrix: a row is all zero")
    if not np.allclose(a.sum(axis=1), 1.0, atol=1e-9, rtol=0):
        raise ValueError("transition rows must sum to 1")
    return a


def smooth_labels_hmm(stream: EaProbabilityStream | Sequence[float], transition,
                      initial: Sequence[float] = (0.5, 0.5)) -> tuple[np.ndarray, np.ndarray]:
    """Forward-backward smoothing of per-segment EA probabilities.

    Hidden states are (non-EA, EA); the classifier output ``p`` is used as
    the emission likelihood of EA and ``1 - p`` as that of non-EA.

    Returns
    -------
    labels : (T,) int array, posterior argmax (1 = EA; ties go to non-EA)
    posterior : (T, 2) array of marginals, rows sum to 1
    """
    p = stream.p_ea if isinstance(stream, EaProbabilityStream) else np.asarray(stream, float)
    if p.size == 0:
        raise ValueError("stream is empty")
    a = _check_transition(transition)
    emit = np.column_stack([1.0 - p, p])
    T = p.size
    alpha = np.empty((T, 2))
    scale = np.empty(T)

    a00, a01, a10, a11 = a[0, 0], a[0, 1], a[1, 0], a[1, 1]
    f0 = initial[0] * emit[0, 0]
    f1 = initial[1] * emit[0, 1]
    for t in range(T):
        if t > 0:
            prev0, prev1 = alpha[t - 1]
            f0 = (prev0 * a00 + prev1 * a10) * emit[t, 0]
            f1 = (prev0 * a01 + prev1 * a11) * emit[t, 1]
        s = f0 + f1
        if s == 0:
            raise ValueError(f"evidence at segment {t} has zero probability under the transition model")
        alpha[t, 0] = f0 / s
        alpha[t, 1] = f1 / s
        scale[t] = s

    beta = np.empty((T, 2))
    beta[-1] = 1.0
    for t in range(T - 2, -1, -1):
        b0 = emit[t + 1, 0] * beta[t + 1, 0]
        b1 = emit[t + 1, 1] * beta[t + 1, 1]
        beta[t, 0] = (a00 * b0 + a01 * b1) / scale[t + 1]
        beta[t, 1] = (a10 * b0 + a11 * b1) / scale[t + 1]

    post = alpha * beta
    post /= post.sum(axis=1, keepdims=True)
    labels = (post[:, 1] > post[:, 0]).astype(np.int8)
    return labels, post


def fit_transition_matrix(sequences: Sequence[Sequence[int]]) -> np.ndarray:
    """Bigram transition estimate with add-one smoothing."""
    counts = np.zeros((2, 2))
    n_trans = 0
    for seq in sequences:
        s = np.asarray(seq, dtype=int)
        if s.size >= 2:
            np.add.at(counts, (s[:-1], s[1:]), 1)
            n_trans += s.size - 1
    if n_trans == 0:
        raise ValueError("no observed transitions")
    counts += 1.0
    return counts / counts.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class WindowFractions:
    start_hours: np.ndarray
    fraction: np.ndarray


def window_fractions_from_counts(n_ea: np.ndarray, n_valid: np.ndarray, steps_per_window: int,
                                 step_hours: float) -> WindowFractions:
    """Sliding-window EA fraction from per-step EA and valid-segment counts."""
    n_ea = np.asarray(n_ea, dtype=float)
    n_valid = np.asarray(n_valid, dtype=float)
    n_steps = n_ea.size
    if n_steps >= steps_per_window:
        ce = np.concatenate([[0.0], np.cumsum(n_ea)])
        cv = np.concatenate([[0.0], np.cumsum(n_valid)])
        num = ce[steps_per_window:] - ce[:-steps_per_window]
        den = cv[steps_per_window:] - cv[:-steps_per_window]
        starts = np.arange(num.size) * step_hours
    else:
        # recording shorter than one window: a single window over what exists
        num = np.array([n_ea.sum()])
        den = np.array([n_valid.sum()])
        starts = np.array([0.0])
    keep = den > 0
    if not keep.any():
        raise ValueError("no non-artifact segments in any window")
    return WindowFractions(starts[keep], num[keep] / den[keep])


def ea_fraction_series(labels: Sequence[int], mask: ArtifactMask | np.ndarray | None = None,
                       window_hours: float = 6.0, step_minutes: float = 10.0,
                       horizon_hours: float = 24.0, min_hours: float = 2.0) -> WindowFractions:
    """EA fraction per sliding window over the first ``horizon_hours``.

    ``mask`` may be an :class:`ArtifactMask` (per 10-s window) or a boolean
    array per 2-s segment. Artifact segments leave both numerator and
    denominator; windows left with no valid segment are dropped.
    """
    labels = np.asarray(labels, dtype=float)
    seg_per_hour = 3600.0 / SEGMENT_SECONDS
    if labels.size < min_hours * seg_per_hour:
        raise ValueError(f"stream shorter than {min_hours} h")
    step_seg = int(round(step_minutes * 60 / SEGMENT_SECONDS))
    horizon_seg = min(labels.size, int(round(horizon_hours * seg_per_hour)))
    n_steps = horizon_seg // step_seg
    labels = labels[: n_steps * step_seg]
    if mask is None:
        valid = np.ones(labels.size, dtype=bool)
    elif isinstance(mask, ArtifactMask):
        valid = ~mask.segment_mask(labels.size)
    else:
        valid = ~np.asarray(mask, dtype=bool)[: labels.size]
    ea = (labels * valid).reshape(n_steps, step_seg).sum(axis=1)
    nv = valid.reshape(n_steps, step_seg).sum(axis=1)
    steps_per_window = int(round(window_hours * 60 / step_minutes))
    return window_fractions_from_counts(ea, nv, steps_per_window, step_minutes / 60.0)


def step_fractions(labels: Sequence[int], mask=None, step_minutes: float = 10.0,
                   horizon_hours: float = 24.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-step (EA count, valid count) for the PD fit and for export."""
    labels = np.asarray(labels, dtype=float)
    step_seg = int(round(step_minutes * 60 / SEGMENT_SECONDS))
    horizon_seg = min(labels.size, int(round(horizon_hours * 3600 / SEGMENT_SECONDS)))
    n_steps = horizon_seg // step_seg
    labels = labels[: n_steps * step_seg]
    if mask is None:
        valid = np.ones(labels.size, dtype=bool)
    elif isinstance(mask, ArtifactMask):
        valid = ~mask.segment_mask(labels.size)
    else:
        valid = ~np.asarray(mask, dtype=bool)[: labels.size]
    ea = (labels * valid).reshape(n_steps, step_seg).sum(axis=1)
    nv = valid.reshape(n_steps, step_seg).sum(axis=1)
    return ea, nv


def burden_summary(fractions: WindowFractions | Sequence[float]) -> tuple[float, float]:
    """(E_max, E_mean) over all windows."""
    f = fractions.fraction if isinstance(fractions, WindowFractions) else np.asarray(fractions, float)
    if f.size == 0:
        raise ValueError("empty fraction series")
    return float(f.max()), float(f.mean())


def bin_index(x, edges: Sequence[float]) -> np.ndarray:
    """Left-closed bins over [0, 1]; the last bin is closed at 1."""
    return np.searchsorted(np.asarray(edges, dtype=float), np.asarray(x, dtype=float), side="right")


def bin_burden(e_max: float, e_mean: float, e_max_edges=E_MAX_EDGES,
               e_mean_edges=E_MEAN_EDGES) -> tuple[str, str]:
    return LEVELS[int(bin_index(e_max, e_max_edges))], LEVELS[int(bin_index(e_mean, e_mean_edges))]


def mean_doses(doses, eeg_hours: float) -> dict[str, float]:
    """Amount delivered during the recording per drug, divided by its length (mg/kg/h)."""
    total: dict[str, float] = {}
    for d in doses:
        if d.time >= eeg_hours:
            continue
        if d.duration > 0:
            covered = min(d.duration, eeg_hours - d.time) / d.duration
            amount = d.amount * covered
        else:
            amount = d.amount
        total[d.drug] = total.get(d.drug, 0.0) + amount
    return {k: v / eeg_hours for k, v in total.items()}


def classify_treatment(mean_dose: Mapping[str, float], median_ed50: Mapping[str, float]) -> bool:
    """True if any drug's mean dose reaches a tenth of its population median ED50."""
    treated = False
    for drug, dose in mean_dose.items():
        if dose <= 0:
            continue
        if drug not in median_ed50:
            raise KeyError(f"no population median ED50 for administered drug {drug!r}")
        if dose >= median_ed50[drug] / 10.0:
            treated = True
    return treated


@dataclass(frozen=True)
class BurdenSummary:
    e_max: float
    e_mean: float
    e_max_bin: str
    e_mean_bin: str
    treated: bool
    e_median: float | None = None
    excluded_artifact: bool = False


def summarize(fractions: WindowFractions, treated: bool, e_max_edges=E_MAX_EDGES,
              e_mean_edges=E_MEAN_EDGES, excluded_artifact: bool = False) -> BurdenSummary:
    e_max, e_mean = burden_summary(fractions)
    bmax, bmean = bin_burden(e_max, e_mean, e_max_edges, e_mean_edges)
    return BurdenSummary(e_max, e_mean, bmax, bmean, treated,
                         float(np.median(fractions.fraction)), excluded_artifact)
