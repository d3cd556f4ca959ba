"""Comparison estimators: naive arm means, logistic outcome regression and propensity matching."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .matching import split_indices

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray  # intercept first
    n_iter: int
    ridge: float
    separated: bool

    def predict(self, x: np.ndarray) -> np.ndarray:
        return special.expit(self.coef[0] + np.asarray(x, dtype=float) @ self.coef[1:])


def _irls(x1: np.ndarray, y: np.ndarray, ridge: float, max_iter: int, tol: float):
    n, q = x1.shape
    beta = np.zeros(q)
    pen = np.full(q, ridge)
    pen[0] = 0.0  # intercept is not penalized
    for it in range(1, max_iter + 1):
        eta = x1 @ beta
        mu = special.expit(eta)
        w = mu * (1.0 - mu)
        grad = x1.T @ (y - mu) - pen * beta
        hess = x1.T @ (x1 * w[:, None]) + np.diag(pen)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            return beta, it, False
        if np.max(np.abs(step)) < tol * (1.0 + np.max(np.abs(beta))):
            return beta, it, True
    return beta, max_iter, False


def _looks_separated(x1, y, beta) -> bool:
    eta = x1 @ beta
    if not np.all(np.isfinite(eta)):
        return True
    # fitted probabilities saturating at the observed labels
    return bool(np.max(np.abs(beta[1:]), initial=0.0) > 15.0 or
                np.all(np.where(y > 0.5, eta > 8.0, eta < -8.0)))


def fit_logistic(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6, max_iter: int = 100,
                 tol: float = 1e-10, separation_ridge: float = 1e-2) -> LogisticFit:
    """Ridge-stabilized logistic regression by iteratively reweighted least squares.

    A ridge of ``ridge`` is always applied to the slopes. When the data look
    separable (diverging or saturated coefficients) the fit is redone with
    ``separation_ridge`` and flagged.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.size:
        raise ValueError("x and y differ in length")
    x1 = np.column_stack([np.ones(y.size), x])
    beta, it, ok = _irls(x1, y, ridge, max_iter, tol)
    if ok and not _looks_separated(x1, y, beta):
        return LogisticFit(beta, it, ridge, False)
    beta2, it2, ok2 = _irls(x1, y, separation_ridge, max_iter, tol)
    if ok2:
        return LogisticFit(beta2, it2, separation_ridge, True)
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations "
                           f"(ridge {ridge}: converged={ok}; ridge {separation_ridge}: "
                           f"converged={ok2}; max |coef| {np.max(np.abs(beta2)):.3g})")


@dataclass(frozen=True)
class NaiveResult:
    estimate: np.ndarray  # per arm, mean over replicates
    spread: np.ndarray  # standard deviation over replicates
    per_replicate: np.ndarray


def naive_average(y: np.ndarray, arms: np.ndarray, n_arms: int, replicates: int = 15,
                  keep_fraction: float = 2.0 / 3.0, seed: int = 0) -> NaiveResult:
    """Arm-stratified outcome means on seeded 2/3 subsamples.

    ``keep_fraction=1`` with one replicate is the plain arm mean. A replicate
    in which an arm is empty is skipped for that arm.
    """
    y = np.asarray(y, dtype=float)
    arms = np.asarray(arms)
    per = np.full((replicates, n_arms), np.nan)
    for r in range(replicates):
        keep = np.arange(y.size) if keep_fraction >= 1 else \
            split_indices(y.size, keep_fraction, seed, r)[0]
        for a in range(n_arms):
            sel = keep[arms[keep] == a]
            if sel.size:
                per[r, a] = y[sel].mean()
    for a in range(n_arms):
        missing = np.isnan(per[:, a])
        if missing.any() and not missing.all():
            log.warning("arm %d empty in %d of %d replicates", a, missing.sum(), replicates)
    with np.errstate(invalid="ignore"):
        est = np.array([np.mean(c[~np.isnan(c)]) if (~np.isnan(c)).any() else math.nan
                        for c in per.T])
        spread = np.array([np.std(c[~np.isnan(c)]) if (~np.isnan(c)).any() else math.nan
                           for c in per.T])
    return NaiveResult(est, spread, per)


def _design(levels: np.ndarray, treated: np.ndarray, x: np.ndarray, n_levels: int) -> np.ndarray:
    dummies = np.stack([(levels == l).astype(float) for l in range(1, n_levels)], axis=1)
    return np.column_stack([dummies, treated.astype(float), x])


def outcome_regression(x: np.ndarray, y: np.ndarray, levels: np.ndarray, treated: np.ndarray,
                       n_levels: int = 4) -> tuple[np.ndarray, LogisticFit]:
    """Logistic outcome model on burden level, treatment and covariates, with g-computation.

    Returns APO per arm code ``level + n_levels * treated``: the fitted
    probability averaged over all patients with their arm set to that arm.
    """
    x = np.asarray(x, dtype=float)
    sd = x.std(axis=0)
    z = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    z = z[:, sd > 0]
    levels = np.asarray(levels)
    treated = np.asarray(treated).astype(int)
    fit = fit_logistic(_design(levels, treated, z, n_levels), y)
    apo = np.empty(2 * n_levels)
    for t in (0, 1):
        for l in range(n_levels):
            d = _design(np.full(y.size, l), np.full(y.size, t), z, n_levels)
            apo[l + n_levels * t] = fit.predict(d).mean()
    return apo, fit


def nearest_by_score(query: np.ndarray, pool: np.ndarray) -> list[np.ndarray]:
    """Indices of ``pool`` closest to each query score, all ties included."""
    pool = np.asarray(pool, dtype=float)
    out = []
    for q in np.asarray(query, dtype=float):
        d = np.abs(pool - q)
        out.append(np.flatnonzero(d == d.min()))
    return out


def propensity_scores(x: np.ndarray, arms: np.ndarray, n_arms: int) -> np.ndarray:
    """One-vs-rest logistic propensity of every arm (columns), nan for empty arms."""
    x = np.asarray(x, dtype=float)
    sd = x.std(axis=0)
    z = ((x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0))[:, sd > 0]
    out = np.full((x.shape[0], n_arms), np.nan)
    for a in range(n_arms):
        target = (np.asarray(arms) == a).astype(float)
        if target.sum() == 0:
            continue
        if z.shape[1] == 0 or target.all():
            out[:, a] = target.mean()
            continue
        out[:, a] = fit_logistic(z, target).predict(z)
    return out


def propensity_match(x: np.ndarray, y: np.ndarray, arms: np.ndarray, n_arms: int) -> np.ndarray:
    """APO per arm by 1-nearest-neighbour matching on that arm's propensity.

    Units in the arm contribute their own outcome; every other unit
    contributes the mean outcome of its nearest arm members (ties averaged).
    """
    y = np.asarray(y, dtype=float)
    arms = np.asarray(arms)
    scores = propensity_scores(x, arms, n_arms)
    apo = np.full(n_arms, np.nan)
    for a in range(n_arms):
        members = np.flatnonzero(arms == a)
        if members.size == 0:
            continue
        others = np.flatnonzero(arms != a)
        imputed = np.empty(y.size)
        imputed[members] = y[members]
        if others.size:
            nn = nearest_by_score(scores[others, a], scores[members, a])
            imputed[others] = [y[members[idx]].mean() for idx in nn]
        apo[a] = imputed.mean()
    return apo


def multinomial_logistic(x: np.ndarray, labels: np.ndarray, n_classes: int,
                         ridge: float = 1e-6) -> np.ndarray:
    """Class probabilities from a ridge-penalized multinomial logistic model.

    Classes never observed get probability 0. Returns an (n, n_classes) array.
    """
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels, dtype=int)
    sd = x.std(axis=0)
    z = ((x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0))[:, sd > 0]
    present = np.unique(labels)
    out = np.zeros((x.shape[0], n_classes))
    if present.size == 1:
        out[:, present[0]] = 1.0
        return out
    z1 = np.column_stack([np.ones(x.shape[0]), z])
    q = z1.shape[1]
    kk = present.size
    onehot = (labels[:, None] == present[None, :]).astype(float)
    pen = np.full(q, ridge)
    pen[0] = 0.0

    def nll(theta):
        b = theta.reshape(q, kk)
        eta = z1 @ b
        lse = special.logsumexp(eta, axis=1)
        val = -(np.sum(onehot * eta) - lse.sum()) + 0.5 * np.sum(pen[:, None] * b * b)
        prob = np.exp(eta - lse[:, None])
        grad = -z1.T @ (onehot - prob) + pen[:, None] * b
        return val, grad.ravel()

    res = optimize.minimize(nll, np.zeros(q * kk), jac=True, method="L-BFGS-B",
                            options={"maxiter": 1000, "gtol": 1e-8})
    if not np.all(np.isfinite(res.x)):
        raise ConvergenceError("multinomial propensity fit diverged")
    eta = z1 @ res.x.reshape(q, kk)
    out[:, present] = special.softmax(eta, axis=1)
    return out
