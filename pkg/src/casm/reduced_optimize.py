"""Reduced two-surrogate optimization, min-norm pullback and a full-space baseline."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, linprog, minimize_scalar

from .errors import InfeasibleProblemError

log = logging.getLogger(__name__)


def _as_map(U, D):
    U = np.asarray(U, dtype=float)
    return U.reshape(D, -1)


@dataclass(frozen=True)
class PullbackResult:
    x_star: np.ndarray
    residual_yF: float
    residual_yG: float
    box_dist: float
    feasible: bool
    y_F: np.ndarray = field(repr=False, default=None)
    y_G: np.ndarray = field(repr=False, default=None)
    method: str = ""


def _lp_feasible(A, b, dom):
    res = linprog(np.zeros(A.shape[1]), A_eq=A, b_eq=b, bounds=list(zip(dom.lower, dom.upper)), method="highs")
    return res.status == 0


def _dual_newton(A, b, dom, lam0, max_iter=100):
    """Semismooth Newton ascent on the dual of ``min |x|^2/2, Ax = b, x in box``.

    For fixed multipliers the box-constrained minimizer is ``clip(A^T lam)``, so
    the primal solution is recovered exactly once ``A clip(A^T lam) = b``.
    """
    lo, hi = dom.lower, dom.upper

    def primal(lam):
        return np.clip(A.T @ lam, lo, hi)

    def dual(lam):
        x = primal(lam)
        return -0.5 * x @ x + lam @ (A @ x) - lam @ b + x @ x - x @ (A.T @ lam)

    lam = lam0
    scale = max(1.0, float(np.linalg.norm(b)))
    for _ in range(max_iter):
        x = primal(lam)
        r = b - A @ x
        if np.linalg.norm(r) <= 1e-13 * scale:
            return x, lam, True
        v = A.T @ lam
        free = (v > lo) & (v < hi)
        Af = A[:, free]
        step = np.linalg.lstsq(Af @ Af.T, r, rcond=None)[0] if free.any() else r
        q0 = dual(lam)
        t = 1.0
        while t > 1e-12:
            cand = lam + t * step
            if dual(cand) >= q0 + 1e-4 * t * (r @ step) or np.linalg.norm(b - A @ primal(cand)) < np.linalg.norm(r):
                break
            t *= 0.5
        lam = lam + t * step
    x = primal(lam)
    return x, lam, bool(np.linalg.norm(b - A @ x) <= 1e-10 * scale)


def _polish(A, b, dom, x, rounds=20):
    """Exact equality solve on the free components, keeping those at a bound fixed.

    Repairs the last digits of an approximate solution and handles targets
    whose feasible set degenerates to a single vertex, where the dual
    multipliers diverge.
    """
    lo, hi = dom.lower, dom.upper
    tol = 1e-10 * np.maximum(1.0, hi - lo)
    fixed = (x <= lo + tol) | (x >= hi - tol)
    x = np.where(x <= lo + tol, lo, np.where(x >= hi - tol, hi, x))
    for _ in range(rounds):
        free = ~fixed
        if not free.any():
            break
        Af = A[:, free]
        rhs = b - A[:, fixed] @ x[fixed]
        xf = Af.T @ np.linalg.lstsq(Af @ Af.T, rhs, rcond=None)[0]
        if np.linalg.matrix_rank(Af) < A.shape[0]:
            xf = np.linalg.lstsq(Af, rhs, rcond=None)[0]
        out = (xf < lo[free] - 1e-14) | (xf > hi[free] + 1e-14)
        x[free] = np.clip(xf, lo[free], hi[free])
        if not out.any():
            break
        idx = np.flatnonzero(free)[out]
        fixed[idx] = True
    return x


def _dykstra(A, b, dom, rounds=500):
    """Dykstra projection of the origin onto ``{Ax = b} cap box``."""
    pinv = np.linalg.pinv(A)

    def proj_affine(v):
        return v - pinv @ (A @ v - b)

    x = np.zeros(A.shape[1])
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(rounds):
        yv = proj_affine(x + p)
        p = x + p - yv
        x_new = dom.clip(yv + q)
        q = yv + q - x_new
        if np.linalg.norm(x_new - x) <= 1e-14 * max(1.0, np.linalg.norm(x)):
            x = x_new
            break
        x = x_new
    return proj_affine(x)


def pullback(y_F, y_G, U1, W1, dom, tol=1e-6):
    """Minimum-norm ``x`` in the box with ``U1^T x = y_F`` and ``W1^T x = y_G``.

    The unconstrained least-norm solution is returned when it lies in the box.
    Otherwise the quadratic program is solved exactly through its dual by a
    semismooth Newton method; Dykstra's alternating projections serve as a
    fallback. Infeasible targets yield ``feasible=False`` rather than an
    exception, with the residuals of the best compromise point.
    """
    D = dom.dim
    U1, W1 = _as_map(U1, D), _as_map(W1, D)
    y_F = np.atleast_1d(np.asarray(y_F, dtype=float))
    y_G = np.atleast_1d(np.asarray(y_G, dtype=float))
    A = np.vstack([U1.T, W1.T])
    b = np.concatenate([y_F, y_G])
    lam, *_ = np.linalg.lstsq(A @ A.T, b, rcond=None)
    x = A.T @ lam
    method = "least_norm"
    if np.linalg.norm(A @ x - b) > 1e-10 * max(1.0, float(np.linalg.norm(b))):
        # incompatible equality targets: keep the least-squares compromise
        x = dom.clip(x)
        method = "infeasible"
    elif not dom.contains(x, 0.0):
        if _lp_feasible(A, b, dom):
            x, lam, ok = _dual_newton(A, b, dom, lam)
            method = "dual_newton"
            if not ok:
                x = _polish(A, b, dom, x)
                method = "active_set"
                if np.linalg.norm(A @ x - b) > 1e-10 * max(1.0, float(np.linalg.norm(b))):
                    x = _dykstra(A, b, dom)
                    method = "dykstra"
        else:
            x = _dykstra(A, b, dom)
            method = "infeasible"
    rF = float(np.linalg.norm(U1.T @ x - y_F))
    rG = float(np.linalg.norm(W1.T @ x - y_G))
    bd = dom.distance(x)
    feasible = method != "infeasible" and max(rF, rG, bd) <= tol
    return PullbackResult(x, rF, rG, bd, bool(feasible), y_F, y_G, method)


def coupling(y_F, y_G, result):
    """``|y_F - U1^T x*| + |y_G - W1^T x*| + dist(x*, X)`` for a pullback result."""
    if result.y_F is not None and (
        not np.allclose(np.atleast_1d(y_F), result.y_F, rtol=0, atol=0)
        or not np.allclose(np.atleast_1d(y_G), result.y_G, rtol=0, atol=0)
    ):
        raise ValueError("pullback result was computed for different targets")
    return result.residual_yF + result.residual_yG + result.box_dist


# --- reduced problem -----------------------------------------------------------


@dataclass
class ReducedProblem:
    """Objective and constraint surrogates with their active maps.

    Surrogates expose ``predict_mean(y)`` on batches of active coordinates;
    the constraint is feasible where its surrogate is ``<= 0``.
    """

    objective: object
    U1: np.ndarray
    constraint: object
    W1: np.ndarray
    domain: object
    coupling_tol: float = 1e-6

    def __post_init__(self):
        D = self.domain.dim
        self.U1 = _as_map(self.U1, D)
        self.W1 = _as_map(self.W1, D)
        for name, W in (("U1", self.U1), ("W1", self.W1)):
            if np.max(np.abs(W.T @ W - np.eye(W.shape[1]))) > 1e-8:
                raise ValueError(f"{name} must have orthonormal columns")


@dataclass
class ReducedSolution:
    y_F: np.ndarray
    y_G: np.ndarray
    x_star: np.ndarray
    objective_value: float
    constraint_value_surrogate: float
    coupling: float
    pullback: PullbackResult
    trace: dict = field(default_factory=dict)
    constraint_value_exact: float = None

    def to_dict(self):
        return {
            "y_F": np.atleast_1d(self.y_F).tolist(),
            "y_G": np.atleast_1d(self.y_G).tolist(),
            "x_star": self.x_star.tolist(),
            "objective_value": self.objective_value,
            "constraint_value_surrogate": self.constraint_value_surrogate,
            "constraint_value_exact": self.constraint_value_exact,
            "coupling": self.coupling,
            "solver_trace_summary": self.trace,
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _grid(lo, hi, n):
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1), axes


def _scalar(v):
    return float(np.atleast_1d(v)[0])


class _SliceRange:
    """Range of ``u^T x`` over ``{x in box : W1^T x = y_G}`` for a single direction ``u``."""

    def __init__(self, u, W1, dom):
        self.u, self.W1, self.dom = u, W1, dom
        self.bounds = list(zip(dom.lower, dom.upper))

    def __call__(self, y_G):
        out = []
        for sgn in (1.0, -1.0):
            res = linprog(sgn * self.u, A_eq=self.W1.T, b_eq=np.atleast_1d(y_G), bounds=self.bounds, method="highs")
            if res.status != 0:
                return None
            out.append(float(self.u @ res.x))
        return out[0], out[1]


def _min_on_interval(F, a, b, n):
    """Minimum of a scalar surrogate on ``[a, b]`` by grid plus bounded refinement."""
    if b - a <= 1e-15 * max(1.0, abs(a)):
        return a, _scalar(F.predict_mean(np.array([[a]])))
    ts = np.linspace(a, b, n)
    vals = np.atleast_1d(F.predict_mean(ts[:, None]))
    j = int(np.argmin(vals))
    best_t, best_v = ts[j], float(vals[j])
    lo, hi = ts[max(j - 1, 0)], ts[min(j + 1, n - 1)]
    if hi > lo:
        res = minimize_scalar(
            lambda t: _scalar(F.predict_mean(np.array([[t]]))), bounds=(lo, hi), method="bounded", options={"xatol": 1e-12}
        )
        if res.fun < best_v:
            best_t, best_v = float(res.x), float(res.fun)
    return best_t, best_v


def _phi_factory(problem, grid_points):
    """``phi(y_G)``: best objective surrogate value over the pullback-feasible ``y_F``."""
    dom = problem.domain
    dF = problem.U1.shape[1]
    if dF == 1:
        rng_F = _SliceRange(problem.U1[:, 0], problem.W1, dom)

        def phi(y_G):
            r = rng_F(y_G)
            if r is None:
                return None
            t, v = _min_on_interval(problem.objective, r[0], r[1], grid_points)
            return np.array([t]), v

        return phi

    lo, hi = dom.projected_bounds(problem.U1)
    cand, _ = _grid(lo, hi, grid_points)
    vals = np.atleast_1d(problem.objective.predict_mean(cand))
    order = np.argsort(vals, kind="stable")
    A_F = problem.U1.T

    def phi(y_G):
        A = np.vstack([A_F, problem.W1.T])
        for j in order:
            if _lp_feasible(A, np.concatenate([cand[j], np.atleast_1d(y_G)]), dom):
                return cand[j], float(vals[j])
        return None

    return phi


def _feasible_root(g, bad, good):
    """Root of ``g`` between an infeasible and a feasible point, on the feasible side."""
    lo, hi = min(bad, good), max(bad, good)
    t = brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    for _ in range(64):
        if g(t) <= 0:
            return t
        t = np.nextafter(t, good)
    return good


def solve_reduced(problem, grid_points=401, refine=True):
    """Minimize the objective surrogate subject to the constraint surrogate and coupling.

    The constraint's active coordinates ``y_G`` are scanned on a grid of
    ``grid_points`` per dimension over the projected box. At every
    surrogate-feasible ``y_G`` the best objective value is taken over the
    ``y_F`` that are projections of a common point of the box, which keeps the
    coupling at zero by construction. For one-dimensional ``y_G`` the best grid
    cell is refined with a bounded scalar search, including the exact root of
    the constraint surrogate when the cell straddles the constraint boundary.
    The point ``x*`` is then recovered by :func:`pullback`.

    Raises :class:`InfeasibleProblemError` when no grid point is feasible.
    """
    dom = problem.domain
    G = problem.constraint
    dG = problem.W1.shape[1]
    lo, hi = dom.projected_bounds(problem.W1)
    yg, axes = _grid(lo, hi, grid_points)
    gvals = np.atleast_1d(G.predict_mean(yg))
    feasible = gvals <= 0
    if not feasible.any():
        raise InfeasibleProblemError("reduced problem infeasible: the constraint surrogate is positive on the whole grid")
    phi = _phi_factory(problem, grid_points)
    best = None
    n_eval = 0
    for j in np.flatnonzero(feasible):
        out = phi(yg[j])
        n_eval += 1
        if out is None:
            continue
        if best is None or out[1] < best[2] - 1e-15:
            best = (yg[j].copy(), out[0], out[1], j)
    if best is None:
        raise InfeasibleProblemError("reduced problem infeasible: no surrogate-feasible point has a pullback")
    y_G, y_F, val, j = best

    if refine and dG == 1:
        ax = axes[0]
        k = j
        a = ax[max(k - 1, 0)]
        b = ax[min(k + 1, ax.size - 1)]
        gfun = lambda t: _scalar(G.predict_mean(np.array([[t]])))  # noqa: E731
        # shrink [a, b] to its surrogate-feasible part around the grid point
        if gfun(a) > 0:
            a = _feasible_root(gfun, a, ax[k])
        if gfun(b) > 0:
            b = _feasible_root(gfun, b, ax[k])
        cands = [a, b]
        if b > a:
            res = minimize_scalar(
                lambda t: (phi(np.array([t])) or (None, np.inf))[1],
                bounds=(a, b),
                method="bounded",
                options={"xatol": 1e-12},
            )
            cands.append(float(res.x))
        for t in cands:
            if gfun(t) > 0:
                continue
            out = phi(np.array([t]))
            n_eval += 1
            if out is not None and out[1] < val - 1e-15:
                y_G, y_F, val = np.array([t]), out[0], out[1]

    pb = pullback(y_F, y_G, problem.U1, problem.W1, dom, problem.coupling_tol)
    c = coupling(y_F, y_G, pb)
    gval = _scalar(G.predict_mean(np.atleast_2d(y_G)))
    trace = {"grid_points": grid_points, "feasible_grid_points": int(feasible.sum()), "phi_evaluations": n_eval,
             "pullback_method": pb.method}
    if c > problem.coupling_tol:
        log.warning("pullback coupling %.3e exceeds tolerance %.1e", c, problem.coupling_tol)
    return ReducedSolution(np.atleast_1d(y_F), np.atleast_1d(y_G), pb.x_star, float(val), gval, float(c), pb, trace)


# --- full-space baseline ---------------------------------------------------------


@dataclass
class FullSolution:
    x_star: np.ndarray
    value: float
    constraint_value: float
    converged: bool
    kkt_residual: float
    iterations: int
    evaluations: int
    multiplier: float


def _split(fun, x):
    out = fun(x)
    return float(out[0]), np.asarray(out[1], dtype=float)


def solve_full(objective, constraint, dom, *, x0=None, tol=1e-5, max_outer=50, max_inner=500, rho=10.0):
    """Augmented-Lagrangian solve of ``min F(x) s.t. G(x) <= 0, x in box``.

    ``objective`` and ``constraint`` return ``(value, gradient)``. Each
    subproblem is solved by projected gradient with Barzilai-Borwein steps and
    Armijo backtracking. Terminates when the KKT residual (projected
    stationarity, constraint violation and complementarity, max-norm) is at or
    below ``tol``; otherwise ``converged`` is false.
    """
    x = dom.center.copy() if x0 is None else dom.clip(np.asarray(x0, dtype=float))
    lam = 0.0
    n_eval = 0
    it = 0

    def aug(xv, lam, rho):
        f, gf = _split(objective, xv)
        g, gg = _split(constraint, xv)
        m = max(0.0, g + lam / rho)
        val = f + 0.5 * rho * m * m - lam * lam / (2 * rho)
        return val, gf + rho * m * gg, f, g, gf, gg

    def kkt(xv, lam, f_grad, g, g_grad):
        grad = f_grad + lam * g_grad
        stat = np.max(np.abs(dom.clip(xv - grad) - xv))
        return max(stat, max(0.0, g), abs(lam * g))

    L, gL, f, g, gf, gg = aug(x, lam, rho)
    n_eval += 1
    prev_viol = max(0.0, g)
    res = kkt(x, lam, gf, g, gg)
    for outer in range(max_outer):
        alpha = 1.0 / max(np.max(np.abs(gL)), 1e-12)
        for inner in range(max_inner):
            it += 1
            pg = dom.clip(x - gL) - x
            if np.max(np.abs(pg)) <= 0.1 * tol:
                break
            while True:
                x_new = dom.clip(x - alpha * gL)
                L_new, gL_new, f_n, g_n, gf_n, gg_n = aug(x_new, lam, rho)
                n_eval += 1
                if L_new <= L + 1e-4 * gL @ (x_new - x) or alpha < 1e-16:
                    break
                alpha *= 0.5
            s_vec, y_vec = x_new - x, gL_new - gL
            sy = s_vec @ y_vec
            alpha = float(s_vec @ s_vec / sy) if sy > 1e-300 else 1.0 / max(np.max(np.abs(gL_new)), 1e-12)
            alpha = min(max(alpha, 1e-12), 1e12)
            x, L, gL, f, g, gf, gg = x_new, L_new, gL_new, f_n, g_n, gf_n, gg_n
            if np.max(np.abs(s_vec)) <= 1e-15:
                break
        lam = max(0.0, lam + rho * g)
        res = kkt(x, lam, gf, g, gg)
        log.debug("AL outer %d: f=%.8g g=%.3e lam=%.4g kkt=%.3e", outer, f, g, lam, res)
        if res <= tol:
            break
        viol = max(0.0, g)
        if viol > 0.25 * prev_viol:
            rho *= 10.0
        prev_viol = viol
        L, gL, f, g, gf, gg = aug(x, lam, rho)
        n_eval += 1
    return FullSolution(x, float(f), float(g), bool(res <= tol), float(res), it, n_eval, float(lam))
