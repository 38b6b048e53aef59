"""Ensemble CATE models built from site predictions on shared target covariates."""

import warnings
from dataclasses import dataclass

import numpy as np

from . import qp
from .errors import DegenerateInputError, InvalidInputError, UnsupportedError
from .learners import SiteDataset, fit_site_learner

METHODS = ("regret", "relative_risk", "risk_2site", "pooled")


class DegenerateGammaWarning(UserWarning):
    pass


class OverlapWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CatePredictionMatrix:
    """``n_Q x S`` matrix; column ``s`` is site ``s``'s CATE on the target draws."""

    values: np.ndarray
    site_ids: tuple = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float, ndmin=2, copy=True)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InvalidInputError("prediction matrix must be non-empty and two-dimensional")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("prediction matrix has non-finite entries")
        ids = tuple(self.site_ids) or tuple(f"site_{s + 1}" for s in range(v.shape[1]))
        if len(ids) != v.shape[1]:
            raise InvalidInputError("site_ids length does not match the number of columns")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "site_ids", ids)

    @property
    def n_target(self):
        return self.values.shape[0]

    @property
    def n_sites(self):
        return self.values.shape[1]

    @classmethod
    def from_predictors(cls, predictors, target_x, site_ids=()):
        cols = [np.asarray(p.predict(target_x), dtype=float) for p in predictors]
        return cls(np.column_stack(cols), site_ids)


@dataclass(frozen=True)
class EnsembleCateModel:
    weights: np.ndarray
    site_predictors: tuple
    method_tag: str

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, ndmin=1, copy=True)
        if w.shape[0] != len(self.site_predictors):
            raise InvalidInputError("one weight per site predictor is required")
        if self.method_tag not in METHODS:
            raise InvalidInputError(f"unknown method tag {self.method_tag!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "site_predictors", tuple(self.site_predictors))

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        total = 0.0
        for w, f in zip(self.weights, self.site_predictors):
            total = total + w * f.predict(x)
        return total

    __call__ = predict

    def combine(self, site_columns):
        """Weighted sum of precomputed site prediction columns (same order as ``predict``)."""
        v = np.asarray(site_columns, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[1] != self.weights.shape[0]:
            raise InvalidInputError("column count does not match the ensemble size")
        total = np.zeros(v.shape[0])
        for s, w in enumerate(self.weights):
            total = total + w * v[:, s]
        return total


@dataclass(frozen=True)
class Diagnostics:
    lambda_min: float
    kkt_residual: float
    worst_case_regret: float
    per_site_regret: np.ndarray
    converged: bool = True
    iterations: int = 0

    @property
    def degenerate(self):
        return self.lambda_min < qp.DEGENERATE_EIG


def estimate_gamma(preds, ridge=0.0):
    """Empirical second-moment matrix ``V'V / n_Q`` of the site predictions."""
    if not isinstance(preds, CatePredictionMatrix):
        preds = CatePredictionMatrix(preds)
    v = preds.values
    return qp.GammaSystem(v.T @ v / v.shape[0], ridge=ridge)


def empirical_regret(model_preds, true_cate):
    """Mean squared difference between an ensemble's predictions and a target CATE."""
    a = np.asarray(model_preds, dtype=float)
    b = np.asarray(true_cate, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError(f"length mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("regret inputs must be finite")
    return float(np.mean((a - b) ** 2))


def _check_predictors(preds, predictors):
    if predictors is None:
        return (None,) * preds.n_sites
    if len(predictors) != preds.n_sites:
        raise InvalidInputError(f"{len(predictors)} predictors for {preds.n_sites} prediction columns")
    return tuple(predictors)


def _diagnostics(system, sol):
    lam = system.lambda_min()
    if lam < qp.DEGENERATE_EIG:
        warnings.warn(
            f"gamma is near-singular (lambda_min={lam:.3e}); weights are one of several minimizers",
            DegenerateGammaWarning, stacklevel=3)
    return Diagnostics(
        lambda_min=lam,
        kkt_residual=sol.kkt_residual,
        worst_case_regret=sol.worst_case_regret,
        per_site_regret=qp.per_site_regret(system.gamma, sol.weights),
        converged=sol.converged,
        iterations=sol.iterations,
    )


def fit_regret_ensemble(preds, predictors=None, poly=None, ridge=0.0, tol=1e-12, max_iter=20_000):
    """Minimax-regret ensemble from site predictions on the target draws."""
    if not isinstance(preds, CatePredictionMatrix):
        preds = CatePredictionMatrix(preds)
    predictors = _check_predictors(preds, predictors)
    system = estimate_gamma(preds, ridge=ridge)
    if poly is None:
        sol = qp.solve_regret_qp(system, tol, max_iter)
    else:
        sol = qp.solve_regret_qp_polytope(system, poly, tol, max_iter)
    model = EnsembleCateModel(sol.weights, predictors, "regret")
    return model, _diagnostics(system, sol)


def fit_relative_risk_ensemble(preds, baseline_preds=None, predictors=None, poly=None, ridge=0.0,
                               tol=1e-12, max_iter=20_000):
    """Ensemble closest in empirical L2 to a baseline model; zeros by default."""
    if not isinstance(preds, CatePredictionMatrix):
        preds = CatePredictionMatrix(preds)
    predictors = _check_predictors(preds, predictors)
    if baseline_preds is None:
        baseline = np.zeros(preds.n_target)
    else:
        baseline = np.asarray(baseline_preds, dtype=float)
    if baseline.shape != (preds.n_target,):
        raise InvalidInputError(
            f"baseline has {baseline.size} entries, expected {preds.n_target}")
    if not np.all(np.isfinite(baseline)):
        raise InvalidInputError("baseline predictions must be finite")
    system = estimate_gamma(preds, ridge=ridge)
    b = preds.values.T @ baseline / preds.n_target
    sol = qp.solve_relative_risk_qp(system, b, poly, tol, max_iter)
    model = EnsembleCateModel(sol.weights, predictors, "relative_risk")
    return model, _diagnostics(system, sol)


def risk_2site_weight(sq_distance, sigma1_sq, sigma2_sq):
    """Closed-form weight on site 1 for the two-site minimax-risk model."""
    if sigma1_sq < 0 or sigma2_sq < 0:
        raise InvalidInputError("noise variances must be non-negative")
    if not sq_distance > 0:
        raise DegenerateInputError("the two site CATEs coincide on the target draws")
    q1 = 0.5 + (sigma1_sq - sigma2_sq) / (2.0 * sq_distance)
    return min(1.0, max(0.0, q1))


def fit_risk_2site_ensemble(preds, sigma1_sq, sigma2_sq, predictors=None):
    """Two-site minimax-risk ensemble with user-supplied noise variances."""
    if not isinstance(preds, CatePredictionMatrix):
        preds = CatePredictionMatrix(preds)
    if preds.n_sites != 2:
        raise UnsupportedError("the minimax-risk closed form is only available for two sites")
    predictors = _check_predictors(preds, predictors)
    diff = preds.values[:, 0] - preds.values[:, 1]
    q1 = risk_2site_weight(float(np.mean(diff ** 2)), sigma1_sq, sigma2_sq)
    return EnsembleCateModel(np.array([q1, 1.0 - q1]), predictors, "risk_2site")


def fit_pooled(sites, learner_config=None, seed=0):
    """Single learner on the concatenation of all site data."""
    sites = list(sites)
    if not sites:
        raise InvalidInputError("pooling needs at least one site")
    dims = {s.dim for s in sites}
    if len(dims) != 1:
        raise InvalidInputError(f"sites have different covariate dimensions: {sorted(dims)}")
    pooled = SiteDataset(
        np.concatenate([s.outcomes for s in sites]),
        np.concatenate([s.treatments for s in sites]),
        np.vstack([s.covariates for s in sites]),
        site_id="pooled",
    )
    return EnsembleCateModel(np.ones(1), (fit_site_learner(pooled, learner_config, seed),), "pooled")


def pooled_reporting_weights(sample_sizes):
    """Sample-size ratios, the weights a pooled model implicitly gives each site."""
    n = np.asarray(sample_sizes, dtype=float)
    if n.ndim != 1 or n.size < 1 or np.any(n <= 0) or not np.all(np.isfinite(n)):
        raise InvalidInputError("sample sizes must be positive")
    return n / n.sum()


def overlap_screen(site_covariates, target_x, coverage=0.99, site_ids=None):
    """Flag sites whose covariate bounding box misses too many target draws.

    A crude check of covariate overlap; returns the flagged site ids and
    emits an :class:`OverlapWarning` for each.
    """
    target_x = np.asarray(target_x, dtype=float)
    flagged = []
    for s, xs in enumerate(site_covariates):
        xs = np.asarray(xs, dtype=float)
        lo, hi = xs.min(axis=0), xs.max(axis=0)
        inside = np.all((target_x >= lo) & (target_x <= hi), axis=1).mean()
        if inside < coverage:
            sid = site_ids[s] if site_ids is not None else f"site_{s + 1}"
            flagged.append(sid)
            warnings.warn(f"{sid}: bounding box covers only {inside:.1%} of target draws",
                          OverlapWarning, stacklevel=2)
    return flagged
