"""Site-level CATE estimation: base regressors, propensity models, meta-learners.

All fitted objects are immutable and deterministic.  ``predict`` accepts
either one covariate vector (returns a float) or an ``n x d`` matrix
(returns a length-``n`` array).
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import ConvergenceError, InvalidInputError
from .rng import substream

PROPENSITY_CLIP = (0.01, 0.99)


@dataclass(frozen=True)
class SiteDataset:
    outcomes: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray
    site_id: str = "site"

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        a = np.asarray(self.treatments)
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim != 1 or a.ndim != 1 or x.ndim != 2:
            raise InvalidInputError("outcomes/treatments must be vectors and covariates a matrix")
        if not (y.shape[0] == a.shape[0] == x.shape[0]):
            raise InvalidInputError("outcomes, treatments and covariates have different row counts")
        if y.shape[0] < 2:
            raise InvalidInputError("a site needs at least two observations")
        if not np.all(np.isin(a, (0, 1))):
            raise InvalidInputError("treatments must be 0/1")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise InvalidInputError("site data contains non-finite values")
        a = a.astype(np.int8)
        for arr in (y, a, x):
            arr.setflags(write=False)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "treatments", a)
        object.__setattr__(self, "covariates", x)

    @property
    def n(self):
        return self.outcomes.shape[0]

    @property
    def dim(self):
        return self.covariates.shape[1]

    def arm(self, value):
        mask = self.treatments == value
        return self.covariates[mask], self.outcomes[mask]


@dataclass(frozen=True)
class BaseLearnerConfig:
    kind: str = "ridge_poly"
    lam: float = 1e-3
    degree: int = 2
    k: int = 10

    def __post_init__(self):
        if self.kind not in ("ridge_poly", "knn"):
            raise InvalidInputError(f"unknown base learner kind {self.kind!r}")
        if self.lam < 0:
            raise InvalidInputError("ridge penalty must be non-negative")
        if self.degree not in (1, 2):
            raise InvalidInputError("polynomial degree must be 1 or 2")
        if self.k < 1:
            raise InvalidInputError("k must be positive")


@dataclass(frozen=True)
class PropensityConfig:
    known_constant: float | None = None
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        if self.known_constant is not None and not 0 < self.known_constant < 1:
            raise InvalidInputError("known propensity must lie in (0, 1)")


class Predictor:
    """Base class for fitted models; subclasses implement ``_predict_rows``."""

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return float(self._predict_rows(x[None, :])[0])
        return self._predict_rows(x)

    __call__ = predict


def _rows(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if dim == 1 else x[None, :]
    if x.shape[1] != dim:
        raise InvalidInputError(f"expected {dim} covariates, got {x.shape[1]}")
    return x


def poly_features(x, degree=2):
    """Linear terms, then squares and pairwise interactions when degree is 2."""
    x = np.asarray(x, dtype=float)
    cols = [x]
    if degree >= 2:
        d = x.shape[1]
        cols.append(x * x)
        pairs = list(combinations(range(d), 2))
        if pairs:
            i, j = np.array(pairs).T
            cols.append(x[:, i] * x[:, j])
    return np.hstack(cols)


class RidgePoly(Predictor):
    def __init__(self, X, y, lam=1e-3, degree=2):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float)
        if X.shape[0] != y.shape[0] or y.shape[0] < 1:
            raise InvalidInputError("ridge fit needs matching, non-empty X and y")
        self.dim = X.shape[1]
        self.degree = degree
        F = poly_features(X, degree)
        f_mean = F.mean(axis=0)
        y_mean = y.mean()
        Fc = F - f_mean
        # intercept is left unpenalized by centering
        A = Fc.T @ Fc + lam * np.eye(F.shape[1])
        rhs = Fc.T @ (y - y_mean)
        try:
            coef = linalg.cho_solve(linalg.cho_factor(A, lower=True), rhs)
        except linalg.LinAlgError:
            coef = np.linalg.lstsq(A, rhs, rcond=None)[0]
        self.coef = coef
        self.intercept = float(y_mean - f_mean @ coef)
        self.coef.setflags(write=False)

    def _predict_rows(self, x):
        x = _rows(x, self.dim)
        return poly_features(x, self.degree) @ self.coef + self.intercept


class KNNRegressor(Predictor):
    """k-nearest-neighbour mean, Euclidean distance, ties to the lowest row."""

    def __init__(self, X, y, k=10):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float)
        if X.shape[0] != y.shape[0] or y.shape[0] < 1:
            raise InvalidInputError("knn fit needs matching, non-empty X and y")
        self.X = X.copy()
        self.y = y.copy()
        self.k = min(int(k), y.shape[0])
        self.dim = X.shape[1]

    def _predict_rows(self, x):
        x = _rows(x, self.dim)
        n = self.X.shape[0]
        out = np.empty(x.shape[0])
        chunk = max(1, 2_000_000 // max(n, 1))
        for start in range(0, x.shape[0], chunk):
            block = x[start:start + chunk]
            diff = block[:, None, :] - self.X[None, :, :]
            dist = np.einsum("ijk,ijk->ij", diff, diff)
            nn = np.argsort(dist, axis=1, kind="stable")[:, :self.k]
            out[start:start + chunk] = self.y[nn].mean(axis=1)
        return out


class ConstantPredictor(Predictor):
    def __init__(self, value):
        self.value = float(value)

    def _predict_rows(self, x):
        return np.full(np.asarray(x).shape[0], self.value)


class FunctionPredictor(Predictor):
    """Wraps a vectorized function of an ``n x d`` covariate matrix."""

    def __init__(self, fn, name=None):
        self.fn = fn
        self.name = name

    def _predict_rows(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)


def fit_base_regressor(X, y, config=None):
    config = config or BaseLearnerConfig()
    if config.kind == "ridge_poly":
        return RidgePoly(X, y, lam=config.lam, degree=config.degree)
    return KNNRegressor(X, y, k=config.k)


class LogisticPropensity(Predictor):
    def __init__(self, coef, clip=PROPENSITY_CLIP):
        self.coef = np.asarray(coef, dtype=float)
        self.clip = clip

    def _predict_rows(self, x):
        x = _rows(x, self.coef.size - 1)
        p = expit(self.coef[0] + x @ self.coef[1:])
        return np.clip(p, *self.clip)


def _logistic_newton(X, a, max_iter, tol):
    n = X.shape[0]
    Z = np.hstack([np.ones((n, 1)), X])
    beta = np.zeros(Z.shape[1])
    lo, hi = PROPENSITY_CLIP

    def nll(b):
        eta = Z @ b
        return float(np.sum(np.logaddexp(0.0, eta) - a * eta))

    current = nll(beta)
    for it in range(1, max_iter + 1):
        p = expit(Z @ beta)
        grad = Z.T @ (p - a)
        if np.linalg.norm(grad) < tol:
            return beta, it
        # separable data: once every fitted probability is clipped on the
        # correct side, further Newton steps cannot change the predictor
        if np.all(np.where(a == 1, p >= hi, p <= lo)):
            return beta, it
        H = (Z * (p * (1 - p))[:, None]).T @ Z + 1e-12 * np.eye(Z.shape[1])
        step = np.linalg.solve(H, grad)
        t = 1.0
        while t > 1e-10:
            cand = beta - t * step
            val = nll(cand)
            if val <= current:
                break
            t *= 0.5
        beta, current = cand, val
    raise ConvergenceError(f"logistic propensity fit did not converge in {max_iter} iterations", max_iter)


def fit_propensity(X, A, config=None):
    config = config or PropensityConfig()
    if config.known_constant is not None:
        return ConstantPredictor(config.known_constant)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    A = np.asarray(A, dtype=float)
    if X.shape[0] != A.shape[0]:
        raise InvalidInputError("X and A have different lengths")
    if not (np.any(A == 1) and np.any(A == 0)):
        raise InvalidInputError("propensity fit needs both treated and control units")
    beta, _ = _logistic_newton(X, A, config.max_iter, config.tol)
    return LogisticPropensity(beta)


def _check_arms(data, minimum=2):
    n1 = int(data.treatments.sum())
    n0 = data.n - n1
    if n0 < minimum or n1 < minimum:
        raise InvalidInputError(
            f"site {data.site_id}: each arm needs at least {minimum} units (control {n0}, treated {n1})")


class TLearner(Predictor):
    def __init__(self, mu0, mu1):
        self.mu0, self.mu1 = mu0, mu1

    def _predict_rows(self, x):
        return self.mu1.predict(x) - self.mu0.predict(x)


def fit_t_learner(data, base_config=None):
    _check_arms(data)
    mu0 = fit_base_regressor(*data.arm(0), base_config)
    mu1 = fit_base_regressor(*data.arm(1), base_config)
    return TLearner(mu0, mu1)


class XLearner(Predictor):
    def __init__(self, tau0, tau1, propensity):
        self.tau0, self.tau1, self.propensity = tau0, tau1, propensity

    def _predict_rows(self, x):
        g = self.propensity.predict(x)
        return g * self.tau0.predict(x) + (1.0 - g) * self.tau1.predict(x)


def fit_x_learner(data, base_config=None, propensity_config=None):
    _check_arms(data)
    x0, y0 = data.arm(0)
    x1, y1 = data.arm(1)
    mu0 = fit_base_regressor(x0, y0, base_config)
    mu1 = fit_base_regressor(x1, y1, base_config)
    tau1 = fit_base_regressor(x1, y1 - mu0.predict(x1), base_config)
    tau0 = fit_base_regressor(x0, mu1.predict(x0) - y0, base_config)
    g = fit_propensity(data.covariates, data.treatments, propensity_config)
    return XLearner(tau0, tau1, g)


def dr_pseudo_outcome(y, a, pi, mu0, mu1):
    """Doubly robust pseudo-outcome for the CATE."""
    y, a, pi, mu0, mu1 = (np.asarray(v, dtype=float) for v in (y, a, pi, mu0, mu1))
    mu_a = np.where(a == 1, mu1, mu0)
    return (a - pi) / (pi * (1.0 - pi)) * (y - mu_a) + mu1 - mu0


def _fold_split(a, folds, seed):
    perm = substream(seed, "dr-folds").permutation(a.shape[0])
    parts = np.array_split(perm, folds)
    for part in parts:
        rest = np.setdiff1d(perm, part, assume_unique=True)
        for idx in (part, rest):
            if idx.size == 0 or a[idx].min() == a[idx].max():
                return None
    return parts


class DRLearner(Predictor):
    def __init__(self, final, pseudo_outcomes):
        self.final = final
        self.pseudo_outcomes = pseudo_outcomes

    def _predict_rows(self, x):
        return self.final.predict(x)


def fit_dr_learner(data, base_config=None, propensity_config=None, folds=2, seed=0):
    if folds < 2:
        raise InvalidInputError("DR-learner needs at least two folds")
    _check_arms(data)
    parts = _fold_split(data.treatments, folds, seed)
    if parts is None:
        parts = _fold_split(data.treatments, folds, seed + 1)
    if parts is None:
        raise InvalidInputError(f"site {data.site_id}: could not form {folds} folds with both arms present")

    X, y, a = data.covariates, data.outcomes, data.treatments
    phi = np.empty(data.n)
    for part in parts:
        train = np.ones(data.n, dtype=bool)
        train[part] = False
        xt, yt, at = X[train], y[train], a[train]
        mu0 = fit_base_regressor(xt[at == 0], yt[at == 0], base_config)
        mu1 = fit_base_regressor(xt[at == 1], yt[at == 1], base_config)
        pi = fit_propensity(xt, at, propensity_config)
        xp = X[part]
        phi[part] = dr_pseudo_outcome(y[part], a[part], pi.predict(xp), mu0.predict(xp), mu1.predict(xp))
    phi.setflags(write=False)
    final = fit_base_regressor(X, phi, base_config)
    return DRLearner(final, phi)


@dataclass(frozen=True)
class LearnerConfig:
    """Which meta-learner to run per site, and its ingredients."""

    meta: str = "t"
    base: BaseLearnerConfig = BaseLearnerConfig()
    propensity: PropensityConfig = PropensityConfig(known_constant=0.5)
    folds: int = 2

    def __post_init__(self):
        if self.meta not in ("t", "x", "dr", "oracle"):
            raise InvalidInputError(f"unknown meta-learner {self.meta!r}")


def fit_site_learner(data, config=None, seed=0):
    config = config or LearnerConfig()
    if config.meta == "t":
        return fit_t_learner(data, config.base)
    if config.meta == "x":
        return fit_x_learner(data, config.base, config.propensity)
    if config.meta == "dr":
        return fit_dr_learner(data, config.base, config.propensity, config.folds, seed)
    raise InvalidInputError("oracle learners have no data fit; supply the true CATE instead")
