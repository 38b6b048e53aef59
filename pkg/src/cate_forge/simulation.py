"""Monte Carlo benchmark: multisite data generation, replications and studies.

Two data-generating settings are provided.  In both, covariates are
``N(0, I_5)``, treatment is ``Bernoulli(0.5)`` and the control mean is
``alpha_s x1 + x2 + x3 + x4 + x5``.  Setting A gives every site the CATE
``beta_s x1 1(x1 > 0) + 0.2 (x1 x2 + x2 x3)``; setting B assigns three
functional families to the site blocks 1-3, 4-6 and 7+.

Randomness is split into named sub-streams (see :mod:`cate_forge.rng`):

* ``("params", r)``          site alphas/betas (``r = 0`` unless resampled)
* ``("target", r)``          target covariates of replication ``r``
* ``("site", r, s)``         data of site ``s`` in replication ``r``
* ``("learner", r, s)``      learner randomness (DR cross-fitting folds)
* ``("mixtures", r)``        random mixtures for the vertex check
"""

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy.special import expit

from . import aggregation as agg
from .errors import InvalidInputError
from .learners import FunctionPredictor, LearnerConfig, SiteDataset, fit_site_learner
from .rng import normals, substream, uniforms

DIM = 5
MIN_SITE_N = 20
MIX_WEIGHT, MIX_MEANS, MIX_SD = 0.7, (0.0, 3.0), 0.75


@dataclass(frozen=True)
class DgpConfig:
    setting: str = "A"
    n_sites: int = 10
    site_alphas: tuple | None = None
    site_betas: tuple | None = None
    allocation: tuple | None = None
    n_total: int = 5000
    n_target: int = 10_000
    noise_sd: float = 1.0
    seed: int = 0
    resample_params: bool = False

    def __post_init__(self):
        if self.setting not in ("A", "B"):
            raise InvalidInputError(f"unknown setting {self.setting!r}")
        if self.n_sites < 1:
            raise InvalidInputError("need at least one site")
        for name in ("site_alphas", "site_betas", "allocation"):
            val = getattr(self, name)
            if val is not None:
                val = tuple(float(v) for v in val)
                if len(val) != self.n_sites:
                    raise InvalidInputError(f"{name} must have {self.n_sites} entries")
                object.__setattr__(self, name, val)
        if self.allocation is not None:
            a = np.array(self.allocation)
            if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-9:
                raise InvalidInputError("allocation must lie on the simplex")
        if self.n_target < 1:
            raise InvalidInputError("n_target must be positive")
        if self.noise_sd < 0:
            raise InvalidInputError("noise_sd must be non-negative")
        counts = site_counts(self)
        if min(counts) < MIN_SITE_N:
            raise InvalidInputError(
                f"site {int(np.argmin(counts)) + 1} gets {min(counts)} units; at least {MIN_SITE_N} required")

    @property
    def weights(self):
        if self.allocation is None:
            return np.full(self.n_sites, 1.0 / self.n_sites)
        return np.array(self.allocation)


def site_counts(config):
    """Per-site sample sizes by largest-remainder rounding of ``n_total * q_mix``."""
    raw = config.n_total * config.weights
    counts = np.floor(raw).astype(int)
    short = config.n_total - counts.sum()
    order = sorted(range(config.n_sites), key=lambda s: (-(raw[s] - counts[s]), s))
    for s in order[:short]:
        counts[s] += 1
    return [int(c) for c in counts]


def _mixture(gen, size):
    u = uniforms(gen, size)
    z = normals(gen, size)
    return np.where(u < MIX_WEIGHT, MIX_MEANS[0], MIX_MEANS[1]) + MIX_SD * z


def sample_site_params(n_sites, seed, replication=0):
    """Draw ``(alphas, betas)`` i.i.d. from 0.7 N(0, 0.75^2) + 0.3 N(3, 0.75^2)."""
    if n_sites < 1:
        raise InvalidInputError("need at least one site")
    gen = substream(seed, "params", replication)
    return _mixture(gen, n_sites), _mixture(gen, n_sites)


def relu_x1(x):
    return x[:, 0] * (x[:, 0] > 0)


def _form_a(beta, x):
    return beta * relu_x1(x) + 0.2 * (x[:, 0] * x[:, 1] + x[:, 1] * x[:, 2])


def _form_logistic(beta, x):
    return beta * 0.6 + (2.0 * expit(12.0 * (x[:, 0] - 0.5))) * (2.0 * expit(12.0 * (x[:, 4] - 0.5)))


def _form_quadratic(beta, x):
    return beta * 0.5 * x[:, 1] ** 2 + 0.3 * (x[:, 2] + x[:, 3])


def setting_b_family(site):
    """Functional family of 0-based ``site`` in setting B."""
    if site < 3:
        return "logistic"
    if site < 6:
        return "hinge"
    return "quadratic"


_FAMILIES = {"logistic": _form_logistic, "hinge": _form_a, "quadratic": _form_quadratic}


@dataclass(frozen=True)
class TrueCateBank:
    setting: str
    betas: tuple

    def family(self, site):
        return "hinge" if self.setting == "A" else setting_b_family(site)

    def tau(self, site, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return _FAMILIES[self.family(site)](self.betas[site], x)

    def matrix(self, x):
        return np.column_stack([self.tau(s, x) for s in range(len(self.betas))])

    def predictor(self, site):
        return FunctionPredictor(lambda x, s=site: self.tau(s, x), name=f"tau_{site + 1}")

    def predictors(self):
        return tuple(self.predictor(s) for s in range(len(self.betas)))


def make_mixture_target(weights, bank):
    """Pointwise convex combination ``sum_s w_s tau_s``."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(bank.betas),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise InvalidInputError("mixture weights must lie on the simplex")

    def tau_q(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        total = np.zeros(x.shape[0])
        for s, ws in enumerate(w):
            total = total + ws * bank.tau(s, x)
        return total

    return tau_q


def control_mean(alpha, x):
    return alpha * x[:, 0] + x[:, 1:].sum(axis=1)


def study_params(config, replication=0):
    """Site parameters in force for ``replication`` (fixed per study unless resampled)."""
    rep = replication if config.resample_params else 0
    alphas, betas = sample_site_params(config.n_sites, config.seed, rep)
    if config.site_alphas is not None:
        alphas = np.array(config.site_alphas)
    if config.site_betas is not None:
        betas = np.array(config.site_betas)
    return alphas, betas


def generate_site(config, site, params=None, replication=0):
    """Simulate site ``site`` (0-based) of ``replication``."""
    if not 0 <= site < config.n_sites:
        raise InvalidInputError(f"site index {site} out of range")
    alphas, betas = params if params is not None else study_params(config, replication)
    n = site_counts(config)[site]
    if n < MIN_SITE_N:
        raise InvalidInputError(f"site {site + 1} would have {n} < {MIN_SITE_N} units")
    gen = substream(config.seed, "site", replication, site)
    x = normals(gen, n * DIM).reshape(n, DIM)
    a = (uniforms(gen, n) < 0.5).astype(np.int8)
    eps = normals(gen, n)
    bank = TrueCateBank(config.setting, tuple(betas))
    y = control_mean(alphas[site], x) + a * bank.tau(site, x) + config.noise_sd * eps
    return SiteDataset(y, a, x, site_id=f"site_{site + 1}")


def generate_target_covariates(config, replication=0):
    gen = substream(config.seed, "target", replication)
    return normals(gen, config.n_target * DIM).reshape(config.n_target, DIM)


def parse_allocation(text):
    """Turn ``balanced``, ``half-first``, ``half-second`` or ``one-large:<k>`` into a scenario tuple."""
    text = text.strip().lower()
    if text == "balanced":
        return ("balanced",)
    if text in ("half-first", "half-second"):
        return ("half_and_half", text.split("-")[1])
    if text.startswith("one-large:"):
        try:
            return ("one_large", int(text.split(":", 1)[1]))
        except ValueError:
            pass
    raise InvalidInputError(f"unknown allocation {text!r}")


def make_allocation(scenario, n_sites):
    """Sampling weights for an allocation scenario.

    ``scenario`` is ``"balanced"``, ``("half_and_half", "first"|"second")``
    (the named half gets three times the weight) or ``("one_large", k)``
    (1-based site ``k`` gets ten times the weight).
    """
    if isinstance(scenario, str):
        scenario = (scenario,)
    kind = scenario[0]
    if kind == "balanced":
        raw = [Fraction(1)] * n_sites
    elif kind == "half_and_half":
        if n_sites % 2 or n_sites < 2:
            raise InvalidInputError("half-and-half needs an even number of sites")
        which = scenario[1] if len(scenario) > 1 else "first"
        if which not in ("first", "second"):
            raise InvalidInputError(f"half must be 'first' or 'second', got {which!r}")
        big = [Fraction(3)] * (n_sites // 2)
        small = [Fraction(1)] * (n_sites // 2)
        raw = big + small if which == "first" else small + big
    elif kind == "one_large":
        k = int(scenario[1]) if len(scenario) > 1 else 1
        if not 1 <= k <= n_sites:
            raise InvalidInputError(f"large site {k} out of range 1..{n_sites}")
        raw = [Fraction(1)] * n_sites
        raw[k - 1] = Fraction(10)
    else:
        raise InvalidInputError(f"unknown allocation scenario {kind!r}")
    total = sum(raw)
    return tuple(float(r / total) for r in raw)


def scenario_label(scenario):
    if isinstance(scenario, str):
        scenario = (scenario,)
    if scenario[0] == "balanced":
        return "balanced"
    if scenario[0] == "half_and_half":
        return f"half-{scenario[1]}"
    return f"one-large:{scenario[1]}"


def random_mixtures(n_sites, n_mix, seed, replication=0):
    """Uniform draws on the simplex (normalized exponentials)."""
    gen = substream(seed, "mixtures", replication)
    e = -np.log(uniforms(gen, n_mix * n_sites)).reshape(n_mix, n_sites)
    return e / e.sum(axis=1, keepdims=True)


def vertex_attainment(model_preds, truth, mixtures):
    """Largest mixture regret and largest vertex regret of one model."""
    model_preds = np.asarray(model_preds, dtype=float)
    vertex = max(agg.empirical_regret(model_preds, truth[:, s]) for s in range(truth.shape[1]))
    mixed = max(agg.empirical_regret(model_preds, truth @ w) for w in mixtures)
    return mixed, vertex


@dataclass
class ReplicationReport:
    replication: int
    seed: int
    methods: tuple
    site_ids: tuple
    per_site_regret: dict
    worst_case_regret: dict
    weights: dict
    site_rmse: np.ndarray
    vertex_check: dict
    wall_clock: float = 0.0
    predictions: dict = field(default_factory=dict, repr=False)
    truth: np.ndarray | None = field(default=None, repr=False)


def _fit_sites(config, sites, learner_config, replication, bank):
    if learner_config.meta == "oracle":
        return bank.predictors()
    return tuple(
        fit_site_learner(data, learner_config, seed=_learner_seed(config, replication, s))
        for s, data in enumerate(sites))


def _learner_seed(config, replication, site):
    # a fixed integer derived from the learner sub-stream, used by DR folds
    return int(substream(config.seed, "learner", replication, site).integers(0, 2 ** 63))


def run_replication(config, methods=("regret", "relative_risk", "pooled"), learner_config=None,
                    replication=0, risk_sigmas=(0.0, 0.0), n_mixtures=50, keep_arrays=False):
    """One Monte Carlo replication: simulate, fit, aggregate, evaluate against the truth."""
    start = time.perf_counter()
    learner_config = learner_config or LearnerConfig()
    methods = tuple(methods)
    for m in methods:
        if m not in agg.METHODS:
            raise InvalidInputError(f"unknown method {m!r}")
    alphas, betas = study_params(config, replication)
    bank = TrueCateBank(config.setting, tuple(betas))
    target_x = generate_target_covariates(config, replication)
    truth = bank.matrix(target_x)
    sites = [generate_site(config, s, (alphas, betas), replication) for s in range(config.n_sites)]
    predictors = _fit_sites(config, sites, learner_config, replication, bank)
    preds = agg.CatePredictionMatrix.from_predictors(predictors, target_x)
    site_ids = preds.site_ids

    model_preds, weights = {}, {}
    for m in methods:
        if m == "regret":
            model, _ = agg.fit_regret_ensemble(preds, predictors)
            model_preds[m] = model.combine(preds.values)
        elif m == "relative_risk":
            model, _ = agg.fit_relative_risk_ensemble(preds, None, predictors)
            model_preds[m] = model.combine(preds.values)
        elif m == "risk_2site":
            model = agg.fit_risk_2site_ensemble(preds, risk_sigmas[0], risk_sigmas[1], predictors)
            model_preds[m] = model.combine(preds.values)
        else:
            if learner_config.meta == "oracle":
                raise InvalidInputError("the pooled method needs a data-fitted learner, not oracle CATEs")
            pooled_seed = _learner_seed(config, replication, config.n_sites)
            model = agg.fit_pooled(sites, learner_config, seed=pooled_seed)
            model_preds[m] = np.asarray(model.predict(target_x), dtype=float)
            weights[m] = agg.pooled_reporting_weights(site_counts(config))
            continue
        weights[m] = np.array(model.weights)

    per_site = {m: np.array([agg.empirical_regret(p, truth[:, s]) for s in range(config.n_sites)])
                for m, p in model_preds.items()}
    worst = {m: float(r.max()) for m, r in per_site.items()}
    mixtures = random_mixtures(config.n_sites, n_mixtures, config.seed, replication)
    vcheck = {m: vertex_attainment(p, truth, mixtures) for m, p in model_preds.items()}
    rmse = np.sqrt(np.mean((preds.values - truth) ** 2, axis=0))
    return ReplicationReport(
        replication=replication,
        seed=config.seed,
        methods=methods,
        site_ids=site_ids,
        per_site_regret=per_site,
        worst_case_regret=worst,
        weights=weights,
        site_rmse=rmse,
        vertex_check=vcheck,
        wall_clock=time.perf_counter() - start,
        predictions=model_preds if keep_arrays else {},
        truth=truth if keep_arrays else None,
    )


@dataclass
class StudyTable:
    """Replication averages; ``rows`` is CSV-ready."""

    methods: tuple
    site_ids: tuple
    n_reps: int
    mean_site_regret: dict
    stderr_site_regret: dict
    mean_worst_case: dict
    stderr_worst_case: dict
    mean_weights: dict
    scenario: str = "balanced"

    def rows(self):
        out = []
        for m in self.methods:
            for s, sid in enumerate(self.site_ids):
                out.append({"scenario": self.scenario, "method": m, "site": sid,
                            "mean_regret": self.mean_site_regret[m][s],
                            "stderr": self.stderr_site_regret[m][s]})
            out.append({"scenario": self.scenario, "method": m, "site": "worst_case",
                        "mean_regret": self.mean_worst_case[m], "stderr": self.stderr_worst_case[m]})
        return out


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    mean = v.mean(axis=0)
    if v.shape[0] < 2:
        return mean, np.zeros_like(mean)
    return mean, v.std(axis=0, ddof=1) / math.sqrt(v.shape[0])


def summarize(reports, scenario="balanced"):
    """Average a list of replication reports into a :class:`StudyTable`."""
    if not reports:
        raise InvalidInputError("no replications to summarize")
    methods = reports[0].methods
    ms, ses, mw, sw, wts = {}, {}, {}, {}, {}
    for m in methods:
        ms[m], ses[m] = _mean_se([r.per_site_regret[m] for r in reports])
        mean, se = _mean_se([r.worst_case_regret[m] for r in reports])
        mw[m], sw[m] = float(mean), float(se)
        if m in reports[0].weights:
            wts[m] = np.mean([r.weights[m] for r in reports], axis=0)
    return StudyTable(methods, reports[0].site_ids, len(reports), ms, ses, mw, sw, wts, scenario)


def pool_size(threads=None):
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("CATE_FORGE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidInputError(f"CATE_FORGE_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def run_replications(config, n_reps, methods=("regret", "relative_risk", "pooled"),
                     learner_config=None, threads=None, **kwargs):
    """Replications ``0..n_reps-1`` on a thread pool; results ordered by index."""
    if n_reps < 1:
        raise InvalidInputError("n_reps must be at least 1")
    workers = min(pool_size(threads), n_reps)

    def one(r):
        return run_replication(config, methods, learner_config, replication=r, **kwargs)

    if workers == 1:
        return [one(r) for r in range(n_reps)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(n_reps)))


def run_study(config, n_reps, methods=("regret", "relative_risk", "pooled"), learner_config=None,
              threads=None, scenario="balanced", **kwargs):
    reports = run_replications(config, n_reps, methods, learner_config, threads, **kwargs)
    return summarize(reports, scenario)


def allocation_study(config, scenarios, n_reps, methods=("regret", "relative_risk", "pooled"),
                     learner_config=None, threads=None):
    """One study per allocation scenario, sharing site parameters and seeds."""
    out = {}
    for sc in scenarios:
        cfg = replace(config, allocation=make_allocation(sc, config.n_sites))
        label = scenario_label(sc)
        out[label] = run_study(cfg, n_reps, methods, learner_config, threads, scenario=label)
    return out


def perturbation_distances(config, deltas, seed, replication=0):
    """Distance between estimated and oracle regret ensembles under perturbed site CATEs.

    Each site prediction is the true CATE plus ``delta`` times a fixed random
    affine function of the covariates (one direction per seed, shared across
    the ``deltas`` ladder).  Returns the empirical L2 distances, one per delta.
    """
    alphas, betas = study_params(config, replication)
    bank = TrueCateBank(config.setting, tuple(betas))
    target_x = generate_target_covariates(config, replication)
    truth = bank.matrix(target_x)
    oracle, _ = agg.fit_regret_ensemble(truth)
    f_star = oracle.combine(truth)
    gen = substream(seed, "perturbation")
    coef = normals(gen, (DIM + 1) * config.n_sites).reshape(DIM + 1, config.n_sites) / math.sqrt(DIM + 1)
    direction = coef[0] + target_x @ coef[1:]
    out = []
    for delta in deltas:
        noisy = truth + delta * direction
        model, _ = agg.fit_regret_ensemble(noisy)
        out.append(math.sqrt(agg.empirical_regret(model.combine(noisy), f_star)))
    return np.array(out)
