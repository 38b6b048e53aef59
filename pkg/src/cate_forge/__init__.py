"""Distributionally robust aggregation of site-specific CATE models."""

from .aggregation import (
    CatePredictionMatrix,
    Diagnostics,
    EnsembleCateModel,
    empirical_regret,
    estimate_gamma,
    fit_pooled,
    fit_regret_ensemble,
    fit_relative_risk_ensemble,
    fit_risk_2site_ensemble,
)
from .errors import ConvergenceError, DegenerateInputError, InvalidInputError, UnsupportedError
from .learners import (
    BaseLearnerConfig,
    LearnerConfig,
    PropensityConfig,
    SiteDataset,
    fit_base_regressor,
    fit_dr_learner,
    fit_propensity,
    fit_t_learner,
    fit_x_learner,
)
from .qp import (
    GammaSystem,
    PolytopeSpec,
    WeightSolution,
    kkt_residual,
    project_to_simplex,
    solve_regret_qp,
    solve_regret_qp_polytope,
    solve_relative_risk_qp,
)

__version__ = "0.1.0"
