import warnings

import numpy as np
import pytest

from cate_forge.aggregation import (
    CatePredictionMatrix,
    DegenerateGammaWarning,
    EnsembleCateModel,
    OverlapWarning,
    empirical_regret,
    estimate_gamma,
    fit_pooled,
    fit_regret_ensemble,
    fit_relative_risk_ensemble,
    fit_risk_2site_ensemble,
    overlap_screen,
    pooled_reporting_weights,
    risk_2site_weight,
)
from cate_forge.errors import DegenerateInputError, InvalidInputError, UnsupportedError
from cate_forge.learners import BaseLearnerConfig, LearnerConfig, SiteDataset, fit_site_learner
from cate_forge.qp import grid_oracle
from cate_forge.simulation import DgpConfig, run_replication


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def gamma_loop(v):
    n, s = v.shape
    g = np.zeros((s, s))
    for i in range(s):
        for j in range(s):
            acc = 0.0
            for k in range(n):
                acc += v[k, i] * v[k, j]
            g[i, j] = acc / n
    return g


# --- gamma ---------------------------------------------------------------------------

def test_gamma_two_columns():
    g = estimate_gamma(np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(g.gamma, [[0.5, 0.0], [0.0, 0.5]])


def test_gamma_constant_column():
    g = estimate_gamma(np.full((7, 1), 3.0))
    assert g.gamma[0, 0] == pytest.approx(9.0)


def test_gamma_matches_double_loop(rng):
    v = rng.normal(size=(60, 4))
    np.testing.assert_allclose(estimate_gamma(v).gamma, gamma_loop(v), rtol=0, atol=1e-12)


def test_prediction_matrix_validation():
    with pytest.raises(InvalidInputError):
        CatePredictionMatrix(np.array([[1.0, np.inf]]))
    with pytest.raises(InvalidInputError):
        CatePredictionMatrix(np.ones((3, 2)), site_ids=("a",))
    assert CatePredictionMatrix(np.ones((3, 2))).site_ids == ("site_1", "site_2")


# --- minimax regret ----------------------------------------------------------------

def test_regret_single_site():
    model, diag = fit_regret_ensemble(np.arange(5.0)[:, None])
    np.testing.assert_array_equal(model.weights, [1.0])
    assert diag.worst_case_regret == pytest.approx(0.0, abs=1e-12)


def test_regret_duplicate_columns_flagged(rng):
    v = rng.normal(size=(100, 1))
    with pytest.warns(DegenerateGammaWarning):
        model, diag = fit_regret_ensemble(np.hstack([v, v]))
    assert diag.degenerate
    assert model.weights.sum() == pytest.approx(1.0)
    assert diag.worst_case_regret == pytest.approx(0.0, abs=1e-10)


def test_regret_opposite_sign_midpoint():
    gen = np.random.default_rng(5)
    x = gen.normal(size=10_000)
    with pytest.warns(DegenerateGammaWarning):
        model, diag = fit_regret_ensemble(np.column_stack([x, -x]))
    np.testing.assert_allclose(model.weights, [0.5, 0.5], atol=0.02)
    assert diag.worst_case_regret == pytest.approx(float(np.mean(x ** 2)), rel=1e-6)


def test_regret_matches_grid(rng):
    v = rng.normal(size=(200, 3)) + rng.normal(size=3)
    model, diag = fit_regret_ensemble(v)
    g = estimate_gamma(v).gamma
    _, obj = grid_oracle(g, np.diag(g))
    q = model.weights
    assert q @ g @ q - q @ np.diag(g) <= obj + 1e-6
    assert diag.kkt_residual <= 1e-6 * (1 + diag.worst_case_regret)


def test_regret_predictor_count_checked(rng):
    with pytest.raises(InvalidInputError):
        fit_regret_ensemble(rng.normal(size=(10, 2)), predictors=[None])


# --- relative risk ---------------------------------------------------------------------

def test_relative_risk_member_baseline(rng):
    v = rng.normal(size=(300, 4))
    model, _ = fit_relative_risk_ensemble(v, baseline_preds=v[:, 2])
    np.testing.assert_allclose(model.weights, [0, 0, 1, 0], atol=1e-6)


def test_relative_risk_zero_baseline_is_default(rng):
    v = rng.normal(size=(300, 3)) + 1.0
    a, _ = fit_relative_risk_ensemble(v)
    b, _ = fit_relative_risk_ensemble(v, baseline_preds=np.zeros(300))
    np.testing.assert_array_equal(a.weights, b.weights)


def test_relative_risk_far_baseline_matches_grid(rng):
    v = rng.normal(size=(250, 3))
    base = 10 * v[:, 0] - 4 * v[:, 1]
    model, _ = fit_relative_risk_ensemble(v, baseline_preds=base)
    g = estimate_gamma(v).gamma
    b = v.T @ base / v.shape[0]
    q_grid, obj = grid_oracle(g, 2 * b)
    q = model.weights
    assert q @ g @ q - 2 * q @ b <= obj + 1e-6
    np.testing.assert_allclose(q, q_grid, atol=1e-2)


def test_relative_risk_baseline_length_checked(rng):
    with pytest.raises(InvalidInputError):
        fit_relative_risk_ensemble(rng.normal(size=(10, 2)), baseline_preds=np.zeros(9))


# --- two-site risk -------------------------------------------------------------------

def test_risk_2site_equal_noise():
    assert risk_2site_weight(3.0, 1.0, 1.0) == 0.5


def test_risk_2site_clipped():
    assert risk_2site_weight(0.1, 5.0, 0.0) == 1.0
    assert risk_2site_weight(0.1, 0.0, 5.0) == 0.0


def test_risk_2site_interior():
    # ||tau1 - tau2||^2 = 2 on the target draws
    v = np.array([[1.0, -1.0], [1.0, -1.0]]) / np.sqrt(2)
    model = fit_risk_2site_ensemble(v, 1.0, 0.0)
    np.testing.assert_allclose(model.weights, [0.75, 0.25])


def test_risk_2site_zero_noise_equals_regret(rng):
    v = rng.normal(size=(500, 2)) + [0.3, -0.2]
    risk = fit_risk_2site_ensemble(v, 0.0, 0.0)
    regret, _ = fit_regret_ensemble(v)
    np.testing.assert_allclose(risk.weights, regret.weights, atol=1e-6)


def test_risk_2site_errors(rng):
    with pytest.raises(UnsupportedError):
        fit_risk_2site_ensemble(rng.normal(size=(10, 3)), 1.0, 1.0)
    with pytest.raises(DegenerateInputError):
        fit_risk_2site_ensemble(np.ones((10, 2)), 1.0, 1.0)
    with pytest.raises(InvalidInputError):
        risk_2site_weight(1.0, -1.0, 0.0)


# --- pooled -----------------------------------------------------------------------------

def toy_site(gen, n, shift, site_id):
    x = gen.normal(size=(n, 2))
    a = np.tile([0, 1], n // 2)
    y = x[:, 0] + a * (shift + x[:, 1]) + 0.1 * gen.normal(size=n)
    return SiteDataset(y, a, x, site_id)


def test_pooled_single_site_equals_site_learner(rng):
    site = toy_site(rng, 200, 1.0, "s")
    x = rng.normal(size=(50, 2))
    pooled = fit_pooled([site], seed=4)
    alone = fit_site_learner(site, LearnerConfig(), seed=4)
    np.testing.assert_allclose(pooled.predict(x), alone.predict(x), atol=1e-12)


def test_pooled_duplicated_site(rng):
    site = toy_site(rng, 200, 1.0, "s")
    x = rng.normal(size=(50, 2))
    cfg = LearnerConfig(base=BaseLearnerConfig(lam=1e-12))
    twice = fit_pooled([site, site], cfg)
    once = fit_pooled([site], cfg)
    np.testing.assert_allclose(twice.predict(x), once.predict(x), atol=1e-6)


def test_pooled_imbalanced_trails_regret_on_worst_case():
    cfg = DgpConfig(setting="A", n_sites=2, site_alphas=(0.0, 0.0), site_betas=(0.0, 3.0),
                    allocation=(0.9, 0.1), n_total=2000, n_target=4000, seed=3)
    rep = run_replication(cfg, methods=("regret", "pooled"))
    assert rep.worst_case_regret["regret"] < rep.worst_case_regret["pooled"]
    # pooling leans toward the large site
    assert rep.per_site_regret["pooled"][1] > rep.per_site_regret["pooled"][0]


def test_pooled_reporting_weights():
    np.testing.assert_allclose(pooled_reporting_weights([30, 10]), [0.75, 0.25])
    with pytest.raises(InvalidInputError):
        pooled_reporting_weights([1, 0])


def test_pooled_dimension_mismatch(rng):
    a = toy_site(rng, 20, 0.0, "a")
    b = SiteDataset(a.outcomes, a.treatments, np.hstack([a.covariates, a.covariates]))
    with pytest.raises(InvalidInputError):
        fit_pooled([a, b])


# --- empirical regret and ensemble model -------------------------------------------

def test_empirical_regret_cases():
    assert empirical_regret(np.zeros(3), np.zeros(3)) == 0.0
    assert empirical_regret(np.ones(4), np.zeros(4)) == 1.0
    assert empirical_regret(np.array([1.0, 3.0]), np.array([0.0, 0.0])) == 5.0
    with pytest.raises(InvalidInputError):
        empirical_regret(np.zeros(3), np.zeros(4))


def test_ensemble_combine_and_predict_agree(rng):
    from cate_forge.learners import FunctionPredictor
    fs = (FunctionPredictor(lambda x: x[:, 0]), FunctionPredictor(lambda x: 2 * x[:, 1]))
    model = EnsembleCateModel(np.array([0.25, 0.75]), fs, "regret")
    x = rng.normal(size=(20, 2))
    cols = np.column_stack([f.predict(x) for f in fs])
    np.testing.assert_array_equal(model.predict(x), model.combine(cols))
    with pytest.raises(InvalidInputError):
        EnsembleCateModel(np.array([1.0]), fs, "regret")
    with pytest.raises(InvalidInputError):
        EnsembleCateModel(np.array([0.5, 0.5]), fs, "average")


# --- invariants ---------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_worst_case_equalization_and_dominance(seed):
    gen = np.random.default_rng(seed)
    v = gen.normal(size=(400, 4)) + gen.normal(scale=2, size=4)
    model, diag = fit_regret_ensemble(v)
    f = model.combine(v)
    regrets = np.array([empirical_regret(f, v[:, s]) for s in range(4)])
    support = model.weights > 1e-6
    # every site in the support attains the worst case
    np.testing.assert_allclose(regrets[support], regrets.max(), atol=1e-6 * (1 + regrets.max()))
    rr, _ = fit_relative_risk_ensemble(v)
    rr_worst = max(empirical_regret(rr.combine(v), v[:, s]) for s in range(4))
    assert regrets.max() <= rr_worst + 1e-8
    assert regrets.max() == pytest.approx(diag.worst_case_regret, abs=1e-9)


def test_affine_consistency(rng):
    v = rng.normal(size=(300, 3))
    fixed = 0.4 * v[:, 0] + 0.6 * v[:, 2]
    target = np.column_stack([v, fixed])
    with pytest.warns(DegenerateGammaWarning):
        model, _ = fit_regret_ensemble(target)
    f = model.combine(target)
    # adding a member of the hull does not change the minimax ensemble
    base, _ = fit_regret_ensemble(v)
    np.testing.assert_allclose(f, base.combine(v), atol=1e-5)


def test_overlap_screen_flags_shifted_site(rng):
    target = rng.normal(size=(500, 2))
    inside = rng.normal(scale=3, size=(500, 2))
    shifted = rng.normal(size=(500, 2)) + 5
    with pytest.warns(OverlapWarning):
        flagged = overlap_screen([inside, shifted], target, site_ids=("a", "b"))
    assert flagged == ["b"]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert overlap_screen([inside], target) == []
