"""Active subspace construction and conditional averaging over the inactive slice.

The gradient covariance ``C = E[grad f grad f^T]`` is estimated by Monte Carlo
under the uniform density on a box, diagonalized, and split into the dominant
directions ``W1`` and their complement ``W2``. A function is then reduced to
the active coordinates ``y = W1^T x`` by averaging it over the slice
``{z : W1 y + W2 z in X}``.
"""

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from ._rng import make_rng
from .errors import EmptySliceError, NonFiniteError, SamplerError

log = logging.getLogger(__name__)

_SLACK = 1e-12


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box ``X = [lower, upper]`` with the uniform density."""

    lower: np.ndarray
    upper: np.ndarray
    density: str = "uniform"

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size < 1:
            raise ValueError("lower and upper must be 1-D vectors of equal length")
        if not np.all(lo < hi):
            raise ValueError("lower[i] < upper[i] is required for every coordinate")
        if self.density != "uniform":
            raise ValueError(f"unsupported density {self.density!r}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, dim, low=-1.0, high=1.0):
        return cls(np.full(dim, float(low)), np.full(dim, float(high)))

    @property
    def dim(self):
        return self.lower.size

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self):
        return 0.5 * (self.upper - self.lower)

    def sample(self, n, rng):
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))

    def contains(self, x, slack=_SLACK):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - slack) and np.all(x <= self.upper + slack))

    def clip(self, x):
        return np.clip(x, self.lower, self.upper)

    def distance(self, x):
        x = np.asarray(x, dtype=float)
        return float(np.linalg.norm(x - self.clip(x)))

    def projected_bounds(self, W):
        """Bounds of ``W^T x`` over the box, one interval per column of ``W``."""
        W = np.asarray(W, dtype=float).reshape(self.dim, -1)
        mid = W.T @ self.center
        rad = np.abs(W).T @ self.half_width
        return mid - rad, mid + rad


class GradientSource:
    """Function value plus gradient, either analytic or by central differences.

    Parameters
    ----------
    fun : callable
        ``fun(x) -> float``. In analytic mode ``fun`` may instead return
        ``(value, gradient)`` when ``jac`` is omitted and ``returns_grad`` is set.
    jac : callable, optional
        ``jac(x) -> ndarray`` analytic gradient.
    step : float, optional
        Finite-difference step. Defaults to ``1e-6 * (upper - lower)``.
    """

    def __init__(self, fun, jac=None, *, returns_grad=False, step=None):
        self.fun = fun
        self.jac = jac
        self.returns_grad = returns_grad
        self.step = step
        if returns_grad or jac is not None:
            self.mode = "analytic"
        else:
            self.mode = "finite_difference"

    @classmethod
    def analytic(cls, fun, jac=None):
        if jac is None:
            return cls(fun, returns_grad=True)
        return cls(fun, jac)

    @classmethod
    def finite_difference(cls, fun, step=None):
        return cls(fun, step=step)

    def value(self, x):
        if self.returns_grad:
            return float(self.fun(x)[0])
        return float(self.fun(x))

    def evaluate(self, x, domain):
        x = np.asarray(x, dtype=float)
        if self.returns_grad:
            val, grad = self.fun(x)
            return float(val), np.asarray(grad, dtype=float)
        if self.jac is not None:
            return float(self.fun(x)), np.asarray(self.jac(x), dtype=float)
        return float(self.fun(x)), self._central_difference(x, domain)

    def _central_difference(self, x, domain):
        width = domain.upper - domain.lower
        h = np.full(x.size, self.step) if self.step is not None else 1e-6 * width
        grad = np.empty(x.size)
        for j in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[j] = min(x[j] + h[j], domain.upper[j])
            xm[j] = max(x[j] - h[j], domain.lower[j])
            grad[j] = (self.fun(xp) - self.fun(xm)) / (xp[j] - xm[j])
        return grad


@dataclass(frozen=True)
class CovarianceEstimate:
    matrix: np.ndarray
    sample_count: int

    def to_csv(self, path):
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.17e")

    @classmethod
    def from_csv(cls, path, sample_count=1):
        return cls(np.atleast_2d(np.loadtxt(path, delimiter=",")), sample_count)


@dataclass(frozen=True)
class ActiveSubspace:
    W1: np.ndarray
    W2: np.ndarray
    eigenvalues: np.ndarray
    d: int
    degenerate: bool = False

    @property
    def W(self):
        return np.hstack([self.W1, self.W2])

    @property
    def dim(self):
        return self.W1.shape[0]

    def project(self, x):
        """Active coordinates ``W1^T x`` of one point or an ``(n, D)`` batch."""
        return np.asarray(x, dtype=float) @ self.W1

    def to_dict(self):
        return {
            "d": int(self.d),
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "W1": self.W1.tolist(),
            "W2": self.W2.tolist(),
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, data):
        D = len(data["eigenvalues"])
        d = int(data["d"])
        W1 = np.asarray(data["W1"], dtype=float).reshape(D, d)
        W2 = np.asarray(data["W2"], dtype=float).reshape(D, D - d)
        return cls(W1, W2, np.asarray(data["eigenvalues"], dtype=float), d)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def estimate_covariance(src, dom, M, seed):
    """Monte Carlo estimate ``(1/M) sum grad f(x_i) grad f(x_i)^T``, ``x_i ~ U(X)``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = make_rng(seed)
    points = dom.sample(M, rng)
    grads = np.empty((M, dom.dim))
    for i, x in enumerate(points):
        _, g = src.evaluate(x, dom)
        if g.shape != (dom.dim,):
            raise ValueError(f"gradient has shape {g.shape}, expected ({dom.dim},)")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient at sample {i}: x={x.tolist()}", point=x)
        grads[i] = g
    C = grads.T @ grads / M
    C = 0.5 * (C + C.T)
    return CovarianceEstimate(C, M)


def _fix_signs(vectors):
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def decompose(C, d):
    """Split the input space into active and inactive directions.

    Eigenvectors are ordered by nonincreasing eigenvalue and each column is
    signed so that its largest-magnitude entry is positive.
    """
    mat = C.matrix if isinstance(C, CovarianceEstimate) else np.asarray(C, dtype=float)
    D = mat.shape[0]
    if not 1 <= d < D:
        raise ValueError(f"d must satisfy 1 <= d < D={D}, got {d}")
    evals, evecs = np.linalg.eigh(0.5 * (mat + mat.T))
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = _fix_signs(evecs[:, order])
    scale = max(abs(evals[0]), 1.0)
    degenerate = bool(abs(evals[d - 1] - evals[d]) <= 1e-12 * scale)
    if degenerate:
        warnings.warn(
            f"eigenvalues {d} and {d + 1} coincide; the active subspace is not unique",
            RuntimeWarning,
            stacklevel=2,
        )
    return ActiveSubspace(evecs[:, :d].copy(), evecs[:, d:].copy(), evals, d, degenerate)


def variance_captured(asub):
    lam = np.asarray(asub.eigenvalues, dtype=float)
    total = lam.sum()
    if total <= 0:
        raise ValueError("all-zero spectrum: constant function")
    if np.all(lam[asub.d:] <= 0):
        return 100.0
    return float(100.0 * lam[: asub.d].sum() / total)


# --- conditional sampling on the inactive slice -----------------------------


@dataclass
class SamplerStats:
    proposals: int = 0
    accepted: int = 0
    method: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self):
        return self.accepted / self.proposals if self.proposals else float("nan")


def _slice_interval(x0, w, dom):
    """Exact interval of scalar ``t`` with ``lower <= x0 + t w <= upper``."""
    lo_t, hi_t = -np.inf, np.inf
    pos, neg = w > 0, w < 0
    if np.any(pos):
        lo_t = max(lo_t, np.max((dom.lower[pos] - x0[pos]) / w[pos]))
        hi_t = min(hi_t, np.min((dom.upper[pos] - x0[pos]) / w[pos]))
    if np.any(neg):
        lo_t = max(lo_t, np.max((dom.upper[neg] - x0[neg]) / w[neg]))
        hi_t = min(hi_t, np.min((dom.lower[neg] - x0[neg]) / w[neg]))
    zero = ~(pos | neg)
    if np.any((x0[zero] < dom.lower[zero] - _SLACK) | (x0[zero] > dom.upper[zero] + _SLACK)):
        return np.inf, -np.inf
    return lo_t, hi_t


def _chebyshev_start(asub, dom, y):
    """Point of the slice farthest from the box faces, found by linear programming."""
    D = asub.dim
    # variables (x, r): maximize r s.t. W1^T x = y, lower + r <= x <= upper - r
    c = np.zeros(D + 1)
    c[-1] = -1.0
    eye = np.eye(D)
    A_ub = np.vstack([np.hstack([eye, np.ones((D, 1))]), np.hstack([-eye, np.ones((D, 1))])])
    b_ub = np.concatenate([dom.upper, -dom.lower])
    A_eq = np.hstack([asub.W1.T, np.zeros((asub.d, 1))])
    bounds = [(None, None)] * D + [(0.0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=y, bounds=bounds, method="highs")
    if res.status == 2:
        raise EmptySliceError(f"y={np.asarray(y).tolist()} lies outside the projected domain")
    if not res.success:
        raise SamplerError("linear program for the slice center failed", {"message": res.message})
    return dom.clip(res.x[:D]), float(res.x[-1])


def _hit_and_run(asub, dom, y, start, N, steps, rng):
    W1 = asub.W1
    x = np.repeat(start[None, :], N, axis=0)
    for step in range(steps):
        u = rng.standard_normal(x.shape)
        u -= (u @ W1) @ W1.T
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            a = (dom.lower - x) / u
            b = (dom.upper - x) / u
        t_lo = np.where(u > 0, a, np.where(u < 0, b, -np.inf)).max(axis=1)
        t_hi = np.where(u > 0, b, np.where(u < 0, a, np.inf)).min(axis=1)
        t_lo = np.minimum(t_lo, 0.0)
        t_hi = np.maximum(t_hi, 0.0)
        t = t_lo + (t_hi - t_lo) * rng.random(N)
        x = dom.clip(x + t[:, None] * u)
        if step % 64 == 63:
            x -= (x @ W1 - y) @ W1.T
    x -= (x @ W1 - y) @ W1.T
    return dom.clip(x)


def slice_bounding_box(asub, dom, y):
    """Coordinate-wise bounds of the inactive slice in ``z`` (2(D-d) linear programs)."""
    m = asub.W2.shape[1]
    x0 = asub.W1 @ y
    lo, hi = np.empty(m), np.empty(m)
    # z must satisfy lower - x0 <= W2 z <= upper - x0
    A_ub = np.vstack([asub.W2, -asub.W2])
    b_ub = np.concatenate([dom.upper - x0, x0 - dom.lower])
    for j in range(m):
        c = np.zeros(m)
        for sgn in (1.0, -1.0):
            c[j] = sgn
            res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * m, method="highs")
            if res.status == 2:
                raise EmptySliceError(f"y={np.asarray(y).tolist()} lies outside the projected domain")
            if sgn > 0:
                lo[j] = res.x[j]
            else:
                hi[j] = res.x[j]
    return lo, hi


def rejection_sample_slice(asub, dom, y, N, seed, max_proposals=None):
    """Uniform slice samples by rejection from the slice's bounding box in ``z``.

    Returns ``(z, stats)``; the acceptance rate estimates the ratio of the
    slice volume to its bounding-box volume.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    rng = make_rng(seed)
    lo, hi = slice_bounding_box(asub, dom, y)
    x0 = asub.W1 @ y
    budget = max_proposals if max_proposals is not None else 1000 * N
    stats = SamplerStats(method="rejection")
    out = []
    batch = max(16, N)
    while len(out) < N:
        if stats.proposals >= budget:
            raise SamplerError(
                f"rejection sampler accepted {stats.accepted}/{stats.proposals} proposals",
                {"proposals": stats.proposals, "accepted": stats.accepted, "box": (lo.tolist(), hi.tolist())},
            )
        z = lo + (hi - lo) * rng.random((batch, lo.size))
        x = x0 + z @ asub.W2.T
        ok = np.all((x >= dom.lower - _SLACK) & (x <= dom.upper + _SLACK), axis=1)
        stats.proposals += batch
        stats.accepted += int(ok.sum())
        out.extend(z[ok])
    log.debug("rejection sampler: %d accepted of %d proposals", stats.accepted, stats.proposals)
    return np.asarray(out[:N]), stats


def sample_inactive(asub, dom, y, N, seed, *, method="auto", burn_in=None, start=None):
    """Draw ``N`` inactive coordinates ``z`` uniformly on the slice at ``y``.

    With one inactive direction the slice is an interval and is sampled
    exactly. Otherwise hit-and-run chains start from ``start`` (or the
    Chebyshev center of the slice) and run ``burn_in`` steps, by default
    ``50 (D - d)``; each returned sample is the end of an independent chain.
    ``method="rejection"`` uses :func:`rejection_sample_slice` instead.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (asub.d,):
        raise ValueError(f"y must have length d={asub.d}")
    if N < 1:
        raise ValueError("N must be >= 1")
    m = asub.W2.shape[1]
    if method == "rejection":
        return rejection_sample_slice(asub, dom, y, N, seed)[0]
    rng = make_rng(seed)
    x0 = asub.W1 @ y
    if m == 1 and method in ("auto", "exact"):
        lo, hi = _slice_interval(x0, asub.W2[:, 0], dom)
        if lo > hi + _SLACK:
            raise EmptySliceError(f"y={y.tolist()} lies outside the projected domain")
        if hi < lo:
            hi = lo = 0.5 * (lo + hi)
        return (lo + (hi - lo) * rng.random(N))[:, None]
    if method not in ("auto", "hit_and_run"):
        raise ValueError(f"unknown method {method!r}")
    if start is None:
        start, radius = _chebyshev_start(asub, dom, y)
    else:
        start = np.asarray(start, dtype=float)
        if not dom.contains(start, 1e-9) or np.max(np.abs(asub.W1.T @ start - y)) > 1e-8:
            raise ValueError("start point is not in the slice")
        radius = None
    steps = 50 * m if burn_in is None else int(burn_in)
    x = _hit_and_run(asub, dom, y, start, N, steps, rng)
    log.debug("hit-and-run: %d chains x %d steps (start radius %s)", N, steps, radius)
    return x @ asub.W2


def slice_points(asub, dom, y, N, seed, **kwargs):
    """Full-space points ``W1 y + W2 z_i`` for ``N`` conditional samples."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = sample_inactive(asub, dom, y, N, seed, **kwargs)
    return dom.clip(asub.W1 @ y + z @ asub.W2.T)


def f_mc(asub, dom, f, y, N, seed, **kwargs):
    """Conditional average ``(1/N) sum f(W1 y + W2 z_i)`` over the slice at ``y``."""
    xs = slice_points(asub, dom, y, N, seed, **kwargs)
    vals = np.array([f(x) for x in xs], dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise NonFiniteError(f"non-finite f at x={xs[bad].tolist()}", point=xs[bad])
    return float(vals.mean())


def write_eigenvalues_csv(path, eigenvalues):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue"])
        for i, lam in enumerate(eigenvalues):
            w.writerow([i, f"{lam:.17e}"])
