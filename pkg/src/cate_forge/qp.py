"""Simplex- and polytope-constrained quadratic programs for aggregation weights.

Every aggregation rule in the package reduces to

    minimize  q' G q - q' c   subject to  q in the probability simplex,

with ``G`` a PSD second-moment matrix of site CATEs.  The minimax-regret
weights use ``c = diag(G)``; the relative-risk weights use ``c = 2 b``.
The solver is projected gradient descent with step ``1/L`` followed by an
equality-constrained polish on the detected support, so results carry a
KKT certificate that is tight to machine precision.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-8
DEGENERATE_EIG = 1e-8


@dataclass(frozen=True)
class GammaSystem:
    """Second-moment matrix of site CATEs under the target covariates.

    ``d`` is always the diagonal of ``gamma``; pass ``ridge`` to add an
    explicit multiple of the identity (the diagonal follows).
    """

    gamma: np.ndarray
    d: np.ndarray = field(init=False)

    def __init__(self, gamma, ridge=0.0):
        g = np.array(gamma, dtype=float, copy=True)
        if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] < 1:
            raise InvalidInputError(f"gamma must be a non-empty square matrix, got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise InvalidInputError("gamma has non-finite entries")
        if np.max(np.abs(g - g.T)) > SYMMETRY_TOL:
            raise InvalidInputError("gamma is not symmetric")
        if ridge < 0:
            raise InvalidInputError("ridge must be non-negative")
        g = 0.5 * (g + g.T)
        if ridge:
            g = g + ridge * np.eye(g.shape[0])
        eig = np.linalg.eigvalsh(g)
        if eig[0] < -PSD_TOL * max(eig[-1], 1.0):
            raise InvalidInputError(f"gamma is not positive semidefinite (min eigenvalue {eig[0]:.3e})")
        g.setflags(write=False)
        d = np.diag(g).copy()
        d.setflags(write=False)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "d", d)

    @property
    def n_sites(self):
        return self.gamma.shape[0]

    def lambda_min(self):
        return float(np.linalg.eigvalsh(self.gamma)[0])


@dataclass(frozen=True)
class PolytopeSpec:
    """Convex polytope inside the simplex, given by its vertex list."""

    vertices: np.ndarray

    def __init__(self, vertices):
        v = np.array(vertices, dtype=float, ndmin=2, copy=True)
        if v.size == 0 or v.shape[0] < 1:
            raise InvalidInputError("polytope needs at least one vertex")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("polytope vertices must be finite")
        if np.any(v < 0) or np.any(np.abs(v.sum(axis=1) - 1.0) > 1e-12):
            raise InvalidInputError("every polytope vertex must lie on the simplex")
        for i in range(v.shape[0]):
            for j in range(i):
                if np.array_equal(v[i], v[j]):
                    raise InvalidInputError(f"duplicate polytope vertices {j} and {i}")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def matrix(self):
        """S x N matrix whose columns are the vertices."""
        return self.vertices.T

    @classmethod
    def full_simplex(cls, n_sites):
        return cls(np.eye(n_sites))


@dataclass(frozen=True)
class WeightSolution:
    weights: np.ndarray
    objective: float
    worst_case_regret: float
    kkt_residual: float
    iterations: int
    converged: bool


def project_to_simplex(v):
    """Euclidean projection of ``v`` onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size < 1:
        raise InvalidInputError("project_to_simplex expects a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("project_to_simplex got non-finite entries")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    w = np.maximum(v - theta, 0.0)
    # cumsum rounding can leave the sum a few ulps off
    return w / w.sum()


def per_site_regret(gamma, q):
    """Squared L2 distance from the ensemble ``sum q_s tau_s`` to each site CATE."""
    gamma = np.asarray(gamma, dtype=float)
    gq = gamma @ q
    return np.diag(gamma) - 2.0 * gq + q @ gq


def kkt_residual(system, q):
    """Maximum violation of the boundary conditions certifying minimax regret.

    With ``R = max_s regret_s`` this is ``max_s q_s (R - regret_s)`` plus any
    feasibility excess; zero exactly when every weighted site sits on the
    worst-case boundary.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (system.n_sites,):
        raise InvalidInputError("weight vector length does not match gamma")
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("weights must be finite")
    regret = per_site_regret(system.gamma, q)
    worst = regret.max()
    slack = np.abs(q * (regret - worst))
    excess = np.maximum(0.0, regret - worst)
    return float(np.max(slack + excess))


def _stationarity_residual(gamma, c, q):
    # gradient 2Gq - c must be constant on the support and no smaller off it
    grad = 2.0 * gamma @ q - c
    nu = grad.min()
    return float(np.max(q * (grad - nu)))


def _power_lambda_max(gamma, n_iter=50):
    s = gamma.shape[0]
    x = np.ones(s) + np.arange(s) / (10.0 * s)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(n_iter):
        y = gamma @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        lam = float(x @ gamma @ x)
    return lam


def _objective(gamma, c, q):
    return float(q @ gamma @ q - q @ c)


def _clean(q):
    q = np.where((q < 0) & (q >= -1e-12), 0.0, q)
    q = np.maximum(q, 0.0)
    return q / q.sum()


def _polish(gamma, c, q, max_rounds=None):
    """Solve the equality-constrained QP on the support of ``q``.

    Returns the polished point, or ``None`` when the reduced KKT system is
    singular or no feasible support is found.
    """
    s = q.size
    support = q > 0
    for _ in range(max_rounds or s):
        idx = np.nonzero(support)[0]
        k = idx.size
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = 2.0 * gamma[np.ix_(idx, idx)]
        kkt[:k, k] = -1.0
        kkt[k, :k] = 1.0
        rhs = np.concatenate([c[idx], [1.0]])
        if np.linalg.cond(kkt) > 1e12:
            return None
        sol = np.linalg.solve(kkt, rhs)
        qs = sol[:k]
        if np.all(qs >= -1e-14):
            out = np.zeros(s)
            out[idx] = np.maximum(qs, 0.0)
            return out / out.sum()
        support[idx[qs < 0]] = False
        if not support.any():
            return None
    return None


def _solve_simplex(gamma, c, tol, max_iter):
    """Projected gradient + support polish for min q'Gq - q'c on the simplex."""
    s = gamma.shape[0]
    if s == 1:
        q = np.ones(1)
        return q, 0, True
    lam = _power_lambda_max(gamma)
    step = 1.0 / (2.0 * lam) if lam > 0 else 1.0
    q = np.full(s, 1.0 / s)
    f = _objective(gamma, c, q)
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        grad = 2.0 * gamma @ q - c
        q_new = project_to_simplex(q - step * grad)
        f_new = _objective(gamma, c, q_new)
        if f_new > f + 1e-15 * (1.0 + abs(f)):
            # power iteration underestimated the curvature
            step *= 0.5
            continue
        decrease = f - f_new
        q, f = q_new, f_new
        if decrease < tol:
            converged = True
            break

    polished = _polish(gamma, c, q)
    if polished is not None:
        f_pol = _objective(gamma, c, polished)
        scale = 1.0 + abs(f)
        if (f_pol <= f + 1e-13 * scale
                and _stationarity_residual(gamma, c, polished)
                <= _stationarity_residual(gamma, c, q) + 1e-15 * scale):
            q = polished
            if _stationarity_residual(gamma, c, q) <= 1e-10 * scale:
                converged = True
    return _clean(q), it, converged


def _check_tol(tol, max_iter):
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    if max_iter < 1:
        raise InvalidInputError("max_iter must be at least 1")


def _finish(system, gamma_red, c_red, q_red, mapping, it, converged):
    q = mapping @ q_red if mapping is not None else q_red
    q = _clean(q)
    return WeightSolution(
        weights=q,
        objective=_objective(gamma_red, c_red, q_red),
        worst_case_regret=float(per_site_regret(system.gamma, q).max()),
        kkt_residual=kkt_residual(system, q),
        iterations=it,
        converged=converged,
    )


def solve_regret_qp(system, tol=1e-12, max_iter=20_000):
    """Minimax-regret weights: argmin over the simplex of q'Gq - q'd."""
    _check_tol(tol, max_iter)
    q, it, conv = _solve_simplex(system.gamma, system.d, tol, max_iter)
    return _finish(system, system.gamma, system.d, q, None, it, conv)


def solve_regret_qp_polytope(system, poly, tol=1e-12, max_iter=20_000):
    """Minimax-regret weights restricted to the convex hull of ``poly``.

    Solves the QP in vertex coordinates and maps back to site weights.  The
    ``kkt_residual`` reported is that of the reduced (vertex) problem.
    """
    _check_tol(tol, max_iter)
    G = poly.matrix
    if G.shape[0] != system.n_sites:
        raise InvalidInputError("polytope dimension does not match gamma")
    g_poly = G.T @ system.gamma @ G
    g_poly = 0.5 * (g_poly + g_poly.T)
    d_poly = np.diag(g_poly).copy()
    q_n, it, conv = _solve_simplex(g_poly, d_poly, tol, max_iter)
    sol = _finish(system, g_poly, d_poly, q_n, G, it, conv)
    reduced = GammaSystem(g_poly)
    return WeightSolution(
        weights=sol.weights,
        objective=sol.objective,
        worst_case_regret=sol.worst_case_regret,
        kkt_residual=kkt_residual(reduced, q_n),
        iterations=it,
        converged=conv,
    )


def solve_relative_risk_qp(system, b, poly=None, tol=1e-12, max_iter=20_000):
    """Relative-risk weights: argmin of q'Gq - 2q'b over the simplex or ``poly``.

    ``b[s]`` is the target-covariate inner product of site ``s``'s CATE with
    the baseline model.  ``kkt_residual`` is the stationarity violation of
    this QP; ``worst_case_regret`` is still the max per-site regret.
    """
    _check_tol(tol, max_iter)
    b = np.asarray(b, dtype=float)
    if b.shape != (system.n_sites,):
        raise InvalidInputError("b must have one entry per site")
    if not np.all(np.isfinite(b)):
        raise InvalidInputError("b has non-finite entries")
    if poly is None:
        gamma, c, G = system.gamma, 2.0 * b, None
    else:
        G = poly.matrix
        if G.shape[0] != system.n_sites:
            raise InvalidInputError("polytope dimension does not match gamma")
        gamma = G.T @ system.gamma @ G
        gamma = 0.5 * (gamma + gamma.T)
        c = 2.0 * (G.T @ b)
    q_r, it, conv = _solve_simplex(gamma, c, tol, max_iter)
    q = _clean(G @ q_r) if G is not None else q_r
    return WeightSolution(
        weights=q,
        objective=_objective(gamma, c, q_r),
        worst_case_regret=float(per_site_regret(system.gamma, q).max()),
        kkt_residual=_stationarity_residual(gamma, c, q_r),
        iterations=it,
        converged=conv,
    )


@lru_cache(maxsize=8)
def _compositions(m, k):
    """All non-negative integer k-vectors with sum <= m, as an array."""
    if k == 0:
        out = np.zeros((1, 0), dtype=np.int64)
    elif k == 1:
        out = np.arange(m + 1, dtype=np.int64)[:, None]
    else:
        i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        pairs = np.stack([i.ravel(), j.ravel()], axis=1)
        out = pairs[pairs.sum(axis=1) <= m]
    if k <= 2:
        out.setflags(write=False)
        return out
    out = []
    for head in _compositions(m, k - 2):
        rest = pairs[pairs.sum(axis=1) <= m - head.sum()]
        out.append(np.hstack([np.broadcast_to(head, (rest.shape[0], head.size)), rest]))
    out = np.vstack(out)
    out.setflags(write=False)
    return out


def grid_oracle(gamma, c, resolution=1e-3, upper=None, max_points=5_000_000):
    """Brute-force minimum of q'Gq - q'c over the simplex.

    The first ``S-2`` coordinates run over a grid of spacing ``resolution``;
    the remaining two are minimized exactly along the segment they span.
    ``upper`` optionally caps every coordinate (box-capped simplex).
    Returns ``(q, objective)``.
    """
    gamma = np.asarray(gamma, dtype=float)
    c = np.asarray(c, dtype=float)
    s = gamma.shape[0]
    if s == 1:
        q = np.ones(1)
        return q, _objective(gamma, c, q)
    m = int(round(1.0 / resolution))
    cap = np.full(s, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, float), (s,))
    lead = s - 2
    n_est = 1.0
    for i in range(lead):
        n_est *= (m + 1 + i) / (i + 1)
    if n_est > max_points:
        raise InvalidInputError(f"grid oracle would need ~{n_est:.3g} points; raise resolution or reduce S")
    p = _compositions(m, lead).astype(float) / m
    if lead:
        p = p[np.all(p <= cap[:lead] + 1e-12, axis=1)]
    r = 1.0 - p.sum(axis=1)
    keep = r >= -1e-12
    p, r = p[keep], np.maximum(r[keep], 0.0)
    lo = np.maximum(0.0, r - cap[-1])
    hi = np.minimum(r, cap[-2])
    ok = lo <= hi + 1e-12
    p, r, lo, hi = p[ok], r[ok], lo[ok], np.maximum(hi[ok], lo[ok])
    if p.shape[0] == 0:
        raise InvalidInputError("capped region is empty")

    a = np.zeros((p.shape[0], s))
    a[:, :lead] = p
    a[:, -1] = r
    u = np.zeros(s)
    u[-2], u[-1] = 1.0, -1.0
    ga = a @ gamma
    base = np.einsum("ij,ij->i", ga, a) - a @ c
    lin = 2.0 * ga @ u - u @ c
    quad = u @ gamma @ u
    if quad > 0:
        t = np.clip(-lin / (2.0 * quad), lo, hi)
    else:
        t = np.where(lin * lo <= lin * hi, lo, hi)
    vals = base + lin * t + quad * t * t
    best = int(np.argmin(vals))
    q = a[best] + t[best] * u
    return q, float(vals[best])
