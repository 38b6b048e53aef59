"""Command-line interface: ``cate-forge simulate|weights|aggregate|evaluate``.

Exit status: 0 on success, 2 for invalid input or usage, 3 when a
numerical routine fails (solver not converged, oracle gap too large,
logistic fit diverged).
"""

import argparse
import os
import sys
import warnings

import numpy as np

from . import aggregation as agg
from . import io, qp, simulation
from .errors import ConvergenceError, InvalidInputError, UnsupportedError
from .learners import BaseLearnerConfig, LearnerConfig, PropensityConfig, fit_site_learner

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
ORACLE_GAP_TOL = 1e-6


def _method_name(text):
    return text.replace("-", "_")


def _add_learner_args(p, oracle=False):
    choices = ["t", "x", "dr"] + (["oracle"] if oracle else [])
    p.add_argument("--learner", choices=choices, default="t", help="meta-learner per site")
    p.add_argument("--base", choices=["ridge_poly", "knn"], default="ridge_poly")
    p.add_argument("--lam", type=float, default=1e-3, help="ridge penalty")
    p.add_argument("--degree", type=int, choices=[1, 2], default=2)
    p.add_argument("--k", type=int, default=10, help="neighbours for knn")
    p.add_argument("--propensity", default="known:0.5",
                   help="'known:<p>' for a randomized design or 'logistic'")
    p.add_argument("--folds", type=int, default=2, help="DR-learner cross-fitting folds")


def _learner_config(args, allow_oracle=False):
    meta = args.learner
    if meta == "oracle" and not allow_oracle:
        raise InvalidInputError("oracle learners are only available in simulate")
    if args.propensity == "logistic":
        prop = PropensityConfig()
    elif args.propensity.startswith("known:"):
        try:
            prop = PropensityConfig(known_constant=float(args.propensity.split(":", 1)[1]))
        except ValueError:
            raise InvalidInputError(f"bad propensity spec {args.propensity!r}") from None
    else:
        raise InvalidInputError(f"bad propensity spec {args.propensity!r}")
    base = BaseLearnerConfig(kind=args.base, lam=args.lam, degree=args.degree, k=args.k)
    return LearnerConfig(meta=meta, base=base, propensity=prop, folds=args.folds)


def build_parser():
    parser = argparse.ArgumentParser(prog="cate-forge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the Monte Carlo benchmark")
    p.add_argument("--setting", choices=["A", "B"], default="A")
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--allocation", action="append",
                   help="balanced | half-first | half-second | one-large:<k>; repeatable")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sites", type=int, default=10)
    p.add_argument("--n-total", type=int, default=5000)
    p.add_argument("--n-target", type=int, default=10_000)
    p.add_argument("--noise-sd", type=float, default=1.0)
    p.add_argument("--methods", default="regret,relative_risk,pooled")
    p.add_argument("--resample-params", action="store_true",
                   help="draw site parameters afresh in every replication")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default="study.csv")
    p.add_argument("--plotdata", default=None, help="defaults to plotdata.csv next to --out")
    p.add_argument("--figures", action="store_true", help="also render PNG charts next to --out")
    _add_learner_args(p, oracle=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("weights", help="aggregation weights from a predictions CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--method", choices=["regret", "relative-risk", "risk-2site", "pooled"], default="regret")
    p.add_argument("--baseline", default="zero", help="'zero' or a one-column CSV of baseline predictions")
    p.add_argument("--polytope", default=None, help="CSV of polytope vertices, one per row")
    p.add_argument("--sigma1-sq", type=float, default=None)
    p.add_argument("--sigma2-sq", type=float, default=None)
    p.add_argument("--sample-sizes", default=None, help="comma-separated site sizes (pooled reporting)")
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--max-iter", type=int, default=20_000)
    p.add_argument("--oracle-check", action="store_true",
                   help="compare against a brute-force grid minimum (at most 4 free weights)")
    p.add_argument("--out", default=None, help="weights JSON path (default: standard output)")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("aggregate", help="fit site learners from raw CSVs, then aggregate")
    p.add_argument("--sites", nargs="+", required=True, help="site CSVs with header y,a,x1..xd")
    p.add_argument("--target", required=True, help="target covariates CSV with header x1..xd")
    p.add_argument("--method", choices=["regret", "relative-risk", "risk-2site", "pooled"], default="regret")
    p.add_argument("--polytope", default=None)
    p.add_argument("--sigma1-sq", type=float, default=None)
    p.add_argument("--sigma2-sq", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    _add_learner_args(p)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("evaluate", help="empirical regret (MSE) of model predictions")
    p.add_argument("--model-preds", required=True)
    p.add_argument("--truth-preds", required=True)
    p.add_argument("--mixture", default=None, help="weights JSON; truth becomes sum_s w_s column_s")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _weights_payload(method, preds, weights, system, extra=None):
    payload = {
        "method": method,
        "site_ids": list(preds.site_ids),
        "weights": [float(w) for w in weights],
        "worst_case_regret": float(qp.per_site_regret(system.gamma, weights).max()),
        "kkt_residual": qp.kkt_residual(system, weights),
        "lambda_min": system.lambda_min(),
    }
    payload.update(extra or {})
    return payload


def _sigmas(args):
    if args.sigma1_sq is None or args.sigma2_sq is None:
        raise InvalidInputError("risk-2site needs --sigma1-sq and --sigma2-sq")
    return args.sigma1_sq, args.sigma2_sq


def _oracle_gap(system, method, b, poly):
    if method == "regret":
        gamma, c = system.gamma, system.d
    else:
        gamma, c = system.gamma, 2.0 * b
    if poly is not None:
        G = poly.matrix
        gamma = G.T @ gamma @ G
        c = np.diag(gamma).copy() if method == "regret" else G.T @ c
    if gamma.shape[0] > 4:
        raise InvalidInputError("--oracle-check supports at most 4 sites or vertices")
    return qp.grid_oracle(gamma, c, resolution=1e-3)


def _solve(method, preds, predictors, args, baseline=None, poly=None):
    """Fit one aggregation method; returns ``(model, payload_extra, system, b)``."""
    system = agg.estimate_gamma(preds, ridge=getattr(args, "ridge", 0.0))
    tol = getattr(args, "tol", 1e-12)
    max_iter = getattr(args, "max_iter", 20_000)
    extra = {}
    b = None
    if method == "regret":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", agg.DegenerateGammaWarning)
            model, diag = agg.fit_regret_ensemble(preds, predictors, poly, getattr(args, "ridge", 0.0), tol, max_iter)
        extra.update(converged=diag.converged, iterations=diag.iterations)
    elif method == "relative_risk":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", agg.DegenerateGammaWarning)
            model, diag = agg.fit_relative_risk_ensemble(preds, baseline, predictors, poly,
                                                         getattr(args, "ridge", 0.0), tol, max_iter)
        base = np.zeros(preds.n_target) if baseline is None else baseline
        b = preds.values.T @ base / preds.n_target
        extra.update(converged=diag.converged, iterations=diag.iterations,
                     qp_stationarity_residual=diag.kkt_residual)
    elif method == "risk_2site":
        s1, s2 = _sigmas(args)
        model = agg.fit_risk_2site_ensemble(preds, s1, s2, predictors)
        extra.update(sigma1_sq=s1, sigma2_sq=s2)
    else:
        raise InvalidInputError(f"unsupported method {method!r}")
    return model, extra, system, b


def cmd_weights(args):
    preds = io.load_predictions_csv(args.predictions)
    method = _method_name(args.method)
    poly = io.load_polytope_csv(args.polytope) if args.polytope else None
    if poly is not None and poly.matrix.shape[0] != preds.n_sites:
        raise InvalidInputError("polytope vertices must have one entry per site")
    if method == "pooled":
        if not args.sample_sizes:
            raise InvalidInputError("pooled weights need --sample-sizes")
        try:
            sizes = [float(v) for v in args.sample_sizes.split(",")]
        except ValueError:
            raise InvalidInputError("--sample-sizes must be comma-separated numbers") from None
        if len(sizes) != preds.n_sites:
            raise InvalidInputError("one sample size per prediction column is required")
        weights = agg.pooled_reporting_weights(sizes)
        system = agg.estimate_gamma(preds)
        payload = _weights_payload("pooled", preds, weights, system, {
            "note": "sample-size ratios; the simulated pooled model is a single learner on concatenated data"})
        _emit(payload, args.out)
        return EXIT_OK

    baseline = None
    if method == "relative_risk" and args.baseline != "zero":
        baseline = io.load_vector_csv(args.baseline)
    model, extra, system, b = _solve(method, preds, None, args, baseline, poly)
    payload = _weights_payload(method, preds, model.weights, system, extra)
    status = EXIT_OK
    if extra.get("converged") is False:
        status = EXIT_NUMERIC
    if args.oracle_check:
        if method == "risk_2site":
            raise InvalidInputError("--oracle-check applies to regret and relative-risk only")
        _, oracle_obj = _oracle_gap(system, method, b, poly)
        if poly is None:
            gamma, c = system.gamma, (system.d if method == "regret" else 2.0 * b)
            solver_obj = float(model.weights @ gamma @ model.weights - model.weights @ c)
        else:
            # the linear term lives in vertex coordinates, so take the reduced objective
            sol = (qp.solve_regret_qp_polytope(system, poly, args.tol, args.max_iter) if method == "regret"
                   else qp.solve_relative_risk_qp(system, b, poly, args.tol, args.max_iter))
            solver_obj = sol.objective
        gap = solver_obj - oracle_obj
        payload.update(oracle_objective=oracle_obj, solver_objective=solver_obj, oracle_gap=gap)
        if gap > ORACLE_GAP_TOL:
            status = EXIT_NUMERIC
    _emit(payload, args.out)
    if status == EXIT_NUMERIC:
        print("error: solver did not reach the required accuracy", file=sys.stderr)
    return status


def _emit(payload, out):
    if out:
        io.dump_json(payload, path=out)
    else:
        io.dump_json(payload, fh=sys.stdout)


def cmd_aggregate(args):
    config = _learner_config(args)
    sites = [io.load_site_csv(p, site_id=f"site_{i + 1}") for i, p in enumerate(args.sites)]
    target = io.load_covariates_csv(args.target)
    dims = {s.dim for s in sites}
    if dims != {target.shape[1]}:
        raise InvalidInputError("site and target covariate dimensions differ")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", agg.OverlapWarning)
        agg.overlap_screen([s.covariates for s in sites], target, site_ids=[s.site_id for s in sites])
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    os.makedirs(args.out_dir, exist_ok=True)
    method = _method_name(args.method)

    if method == "pooled":
        model = agg.fit_pooled(sites, config, seed=args.seed)
        ens = np.asarray(model.predict(target), dtype=float)
        io.write_vector_csv(os.path.join(args.out_dir, "ensemble.csv"), "cate", ens)
        io.dump_json({"method": "pooled", "weights": [1.0],
                      "reporting_weights": agg.pooled_reporting_weights([s.n for s in sites])},
                     path=os.path.join(args.out_dir, "weights.json"))
        return EXIT_OK

    predictors = [fit_site_learner(s, config, seed=args.seed + i) for i, s in enumerate(sites)]
    preds = agg.CatePredictionMatrix.from_predictors(predictors, target, [s.site_id for s in sites])
    io.write_predictions_csv(os.path.join(args.out_dir, "predictions.csv"), preds)
    poly = io.load_polytope_csv(args.polytope) if args.polytope else None
    model, extra, system, _ = _solve(method, preds, predictors, args, None, poly)
    io.write_vector_csv(os.path.join(args.out_dir, "ensemble.csv"), "cate", model.combine(preds.values))
    payload = _weights_payload(method, preds, model.weights, system, extra)
    io.dump_json(payload, path=os.path.join(args.out_dir, "weights.json"))
    return EXIT_NUMERIC if extra.get("converged") is False else EXIT_OK


def cmd_evaluate(args):
    model = io.load_vector_csv(args.model_preds)
    header, truth = io.load_matrix_csv(args.truth_preds)
    if truth.shape[0] != model.shape[0]:
        raise InvalidInputError(
            f"model has {model.shape[0]} rows but truth has {truth.shape[0]}")
    if args.mixture:
        w = io.load_weights_json(args.mixture)
        if w.shape[0] != truth.shape[1]:
            raise InvalidInputError("mixture weights must match the truth columns")
        composed = np.zeros(truth.shape[0])
        for s, ws in enumerate(w):
            composed = composed + ws * truth[:, s]
        result = {"mse": agg.empirical_regret(model, composed)}
    elif truth.shape[1] == 1:
        result = {"mse": agg.empirical_regret(model, truth[:, 0])}
    else:
        per = {h: agg.empirical_regret(model, truth[:, j]) for j, h in enumerate(header)}
        result = {"per_column_mse": per, "worst_case_mse": max(per.values())}
    _emit(result, args.out)
    return EXIT_OK


def cmd_simulate(args):
    config = _learner_config(args, allow_oracle=True)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    for m in methods:
        if m not in agg.METHODS:
            raise InvalidInputError(f"unknown method {m!r}")
    if args.reps < 1:
        raise InvalidInputError("--reps must be at least 1")
    scenarios = [simulation.parse_allocation(a) for a in (args.allocation or ["balanced"])]
    base = simulation.DgpConfig(setting=args.setting, n_sites=args.sites, n_total=args.n_total,
                                n_target=args.n_target, noise_sd=args.noise_sd, seed=args.seed,
                                resample_params=args.resample_params)
    tables = list(simulation.allocation_study(base, scenarios, args.reps, methods, config,
                                              args.threads).values())
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    io.write_study_csv(args.out, tables)
    plot_path = args.plotdata or os.path.join(out_dir, "plotdata.csv")
    io.write_plotdata_csv(plot_path, tables)
    if args.figures:
        from .plotting import render_figures
        render_figures(io.read_plotdata_csv(plot_path), out_dir)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInputError, UnsupportedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConvergenceError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
