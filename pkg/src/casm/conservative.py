"""Bias calibration for conservative surrogates.

The signed distance ``S = mu_beta(W1^T X) - f(X)`` is sampled from the table
of full-space evaluations gathered while training the surrogate, so
calibration costs no new evaluations of ``f``. Two bisection schemes pick the
bias: one drives a Chernoff-type lower bound on ``P[S > 0]`` to the target,
the other drives the bootstrap estimate of ``P[S > 0]`` itself.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from . import _rng
from .active_subspace import slice_points
from .errors import CalibrationError, NonFiniteError
from .surrogate import GprSurrogate, TrainingSet, check_assumption_rowsums

log = logging.getLogger(__name__)

_BOOT_CHUNK = 2_000_000


@dataclass(frozen=True)
class SignedDistanceTable:
    """Projected training points ``y_k`` (s x d) and evaluations ``f_ik`` (s x N)."""

    y_k: np.ndarray
    f_ik: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y_k, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        f = np.atleast_2d(np.asarray(self.f_ik, dtype=float))
        if y.shape[0] != f.shape[0]:
            raise ValueError("y_k and f_ik must have the same number of rows")
        if not np.all(np.isfinite(f)):
            raise NonFiniteError("table contains non-finite evaluations")
        object.__setattr__(self, "y_k", y)
        object.__setattr__(self, "f_ik", f)

    @property
    def s(self):
        return self.f_ik.shape[0]

    @property
    def N(self):
        return self.f_ik.shape[1]

    def training_set(self):
        """Training data ``(y_k, mean_i f_ik)``: the conditional averages."""
        return TrainingSet(self.y_k, self.f_ik.mean(axis=1))


class CountingFunction:
    """Wrap ``f`` and count its calls."""

    def __init__(self, f):
        self.f = f
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return self.f(x)


def build_table(asub, dom, f, y_tr, N, seed, *, starts=None, burn_in=None):
    """Evaluate ``f`` at ``N`` conditional samples above each training location.

    Row ``k`` uses the child seed ``stream_seed(seed, k)``, so
    ``f_mc(asub, dom, f, y_tr[k], N, stream_seed(seed, k))`` reproduces the
    row mean. ``starts`` optionally supplies a full-space point in each slice
    to start the hit-and-run chains from.
    """
    y_tr = np.asarray(y_tr, dtype=float).reshape(-1, asub.d)
    f_ik = np.empty((y_tr.shape[0], N))
    for k, y in enumerate(y_tr):
        kwargs = {"burn_in": burn_in}
        if starts is not None:
            kwargs["start"] = starts[k]
        xs = slice_points(asub, dom, y, N, _rng.stream_seed(seed, k), **kwargs)
        for i, x in enumerate(xs):
            val = float(f(x))
            if not np.isfinite(val):
                raise NonFiniteError(f"non-finite f at x={x.tolist()}", point=x)
            f_ik[k, i] = val
    return SignedDistanceTable(y_tr, f_ik)


@dataclass(frozen=True)
class SignedDistanceSample:
    values: np.ndarray
    beta: float
    seed: int

    @property
    def K(self):
        return self.values.size


@dataclass(frozen=True)
class TailBoundConfig:
    bootstrap_resamples: int = 2000
    u_min: float = 1e-4
    u_max: float = 1e2
    u_count: int = 40

    def __post_init__(self):
        if self.bootstrap_resamples < 100:
            raise ValueError("bootstrap_resamples must be >= 100")
        if self.u_count < 20:
            raise ValueError("u_count must be >= 20")
        if not 0 < self.u_min < self.u_max:
            raise ValueError("need 0 < u_min < u_max")


@dataclass
class BiasCalibration:
    beta: float
    achieved_probability: float
    method: str
    iterations: int
    trace: list
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "beta": self.beta,
            "achieved_probability": self.achieved_probability,
            "method": self.method,
            "iterations": self.iterations,
            "trace": [[float(b), float(e)] for b, e in self.trace],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            float(data["beta"]),
            float(data["achieved_probability"]),
            data["method"],
            int(data["iterations"]),
            [tuple(t) for t in data["trace"]],
            list(data.get("warnings", [])),
        )

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _surrogate_terms(table, surrogate):
    mu, v = surrogate.unbiased_and_weight(table.y_k)
    return np.atleast_1d(mu), np.atleast_1d(v)


def sample_signed_distance(table, surrogate, K=None, seed=0):
    """Draw ``K`` values ``mu_beta(y_k) - f_ik`` with ``k`` and ``i`` uniform."""
    if table.s == 0 or table.N == 0:
        raise ValueError("empty signed-distance table")
    K = table.s * table.N if K is None else int(K)
    rng = _rng.make_rng(seed)
    k = rng.integers(0, table.s, size=K)
    i = rng.integers(0, table.N, size=K)
    mu = np.atleast_1d(surrogate.predict_mean(table.y_k))
    return SignedDistanceSample(mu[k] - table.f_ik[k, i], float(surrogate.bias), int(seed))


def _bootstrap_stat(values, B, seed, stat):
    rng = _rng.make_rng(seed)
    K = values.size
    chunk = max(1, _BOOT_CHUNK // max(K, 1))
    out = np.empty(B)
    for start in range(0, B, chunk):
        stop = min(B, start + chunk)
        idx = rng.integers(0, K, size=(stop - start, K))
        out[start:stop] = stat(values[idx])
    return out


def bootstrap_mean(s, B=2000, seed=0):
    """Average of ``B`` resampled-with-replacement means of the sample."""
    if B < 1:
        raise ValueError("B must be >= 1")
    vals = s.values if isinstance(s, SignedDistanceSample) else np.asarray(s, dtype=float)
    if np.ptp(vals) == 0:
        return float(vals[0])
    return float(_bootstrap_stat(vals, B, seed, lambda r: r.mean(axis=1)).mean())


def bootstrap_conservativeness(s, B=2000, seed=0):
    """Average over ``B`` resamples of the fraction of positive values."""
    if B < 1:
        raise ValueError("B must be >= 1")
    vals = s.values if isinstance(s, SignedDistanceSample) else np.asarray(s, dtype=float)
    pos = (vals > 0).astype(float)
    if np.ptp(pos) == 0:
        return float(pos[0])
    return float(_bootstrap_stat(pos, B, seed, lambda r: r.mean(axis=1)).mean())


def chernoff_bound(s, eps, center, cfg=None):
    """Empirical Chernoff bound on ``P[|S - center| > eps]``.

    Minimizes ``log mean exp(u (|s_k - center| - eps))`` over ``u`` on a log grid
    followed by a bounded refinement of the best cell, and returns the
    exponential of the minimum clipped to ``[0, 1]``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    cfg = cfg or TailBoundConfig()
    vals = s.values if isinstance(s, SignedDistanceSample) else np.asarray(s, dtype=float)
    dev = np.abs(vals - center) - eps
    log_n = np.log(dev.size)

    def log_bound(log_u):
        return float(logsumexp(np.exp(log_u) * dev) - log_n)

    grid = np.linspace(np.log(cfg.u_min), np.log(cfg.u_max), cfg.u_count)
    vals_grid = np.array([log_bound(g) for g in grid])
    j = int(np.argmin(vals_grid))
    best = vals_grid[j]
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
    res = minimize_scalar(log_bound, bounds=(lo, hi), method="bounded", options={"xatol": 1e-8})
    best = min(best, float(res.fun))
    return float(np.clip(np.exp(min(best, 0.0)), 0.0, 1.0))


def _check_inputs(tau, delta, beta_max):
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    if not delta > 0:
        raise ValueError("delta must be positive")
    if not beta_max > 0:
        raise ValueError("beta_max must be positive")


def _assumption_warnings(surrogate):
    if isinstance(surrogate, GprSurrogate):
        rep = check_assumption_rowsums(surrogate)
        if not rep.holds:
            msg = (
                f"row sums of (K + noise I)^-1 are not all nonnegative (min {rep.min_row_sum:.3e}); "
                "the conservativeness probability may not increase monotonically with the bias"
            )
            log.warning(msg)
            return [msg]
    return []


def _bisect(estimate, tau, delta, beta_max, max_iter, method, warn):
    """Shared bisection driver.

    ``estimate(beta, n)`` returns ``(value, go_up)``: the probability estimate
    at iteration ``n`` and whether the lower bracket must move up to ``beta``.
    """
    beta_l, beta_m = 0.0, float(beta_max)
    beta = beta_m / 2.0
    trace = []
    best_hi = None
    floor = 1e-9 * beta_max
    for n in range(max_iter):
        value, go_up = estimate(beta, n)
        trace.append((beta, value))
        log.debug("%s iteration %d: beta=%.6g estimate=%.6g", method, n, beta, value)
        if abs(value - tau) <= delta:
            return BiasCalibration(beta, value, method, n + 1, trace, warn)
        if go_up:
            beta_l = beta
        else:
            beta_m = beta
            best_hi = (beta, value)
        if beta_m - beta_l < floor:
            break
        beta = 0.5 * (beta_l + beta_m)
    else:
        warn = warn + [f"iteration cap {max_iter} reached before |estimate - tau| <= delta"]
        if best_hi is None:
            raise CalibrationError("bracket exhausted: beta_max is too small for tau", trace, "beta_max")
        return BiasCalibration(best_hi[0], best_hi[1], method, len(trace), trace, warn)

    if best_hi is None:
        raise CalibrationError(
            f"bracket exhausted at beta_max={beta_max:g}: the target tau={tau:g} was never exceeded",
            trace,
            "beta_max",
        )
    if beta_l == 0.0:
        raise CalibrationError(
            f"tau={tau:g} is below the base conservativeness level of the unbiased surrogate",
            trace,
            "base_level",
        )
    warn = warn + ["bracket collapsed before |estimate - tau| <= delta; returning the upper bracket"]
    return BiasCalibration(best_hi[0], best_hi[1], method, len(trace), trace, warn)


def calibrate_chernoff(table, surrogate, tau, delta, beta_max, cfg=None, *, K=None, seed=0, max_iter=60):
    """Bisection on the bias until ``1 - chi(E_boot[S])`` is within ``delta`` of ``tau``.

    ``chi`` is :func:`chernoff_bound` centered at, and with radius equal to,
    the bootstrap mean of the signed distance. While that mean is not positive
    the lower bracket is raised. Iteration ``n`` draws its sample and
    bootstrap indices from child seeds ``(seed, n, 0)`` and ``(seed, n, 1)``.
    """
    _check_inputs(tau, delta, beta_max)
    cfg = cfg or TailBoundConfig()
    warn = _assumption_warnings(surrogate)

    def estimate(beta, n):
        sample = sample_signed_distance(table, surrogate.with_bias(beta), K, _rng.stream_seed(seed, n, 0))
        mean = bootstrap_mean(sample, cfg.bootstrap_resamples, _rng.stream_seed(seed, n, 1))
        if mean <= 0:
            return 0.0, True
        p = 1.0 - chernoff_bound(sample, mean, mean, cfg)
        return p, not p > tau

    return _bisect(estimate, tau, delta, beta_max, max_iter, "chernoff", warn)


_BASE_KEY = 1_000_000


def base_conservativeness(table, surrogate, cfg=None, *, K=None, seed=0):
    """Bootstrap estimate of ``P[S > 0]`` for the unbiased surrogate."""
    cfg = cfg or TailBoundConfig()
    sample = sample_signed_distance(table, surrogate.with_bias(0.0), K, _rng.stream_seed(seed, _BASE_KEY, 0))
    return bootstrap_conservativeness(sample, cfg.bootstrap_resamples, _rng.stream_seed(seed, _BASE_KEY, 1))


def calibrate_bootstrap(table, surrogate, tau, delta, beta_max, cfg=None, *, K=None, seed=0, max_iter=60):
    """Bisection on the bias until the bootstrap ``P[S > 0]`` is within ``delta`` of ``tau``.

    When the unbiased surrogate is already more conservative than ``tau``
    every step lowers the upper bracket; once the bracket collapses onto zero
    without meeting the tolerance a :class:`CalibrationError` with
    ``reason="base_level"`` is raised. Each step draws a fresh sample, so a
    base level within sampling noise of ``tau`` can still terminate normally.
    """
    _check_inputs(tau, delta, beta_max)
    cfg = cfg or TailBoundConfig()
    warn = _assumption_warnings(surrogate)

    def estimate(beta, n):
        sample = sample_signed_distance(table, surrogate.with_bias(beta), K, _rng.stream_seed(seed, n, 0))
        p = bootstrap_conservativeness(sample, cfg.bootstrap_resamples, _rng.stream_seed(seed, n, 1))
        return p, not p > tau

    return _bisect(estimate, tau, delta, beta_max, max_iter, "bootstrap", warn)


def calibrate(method, table, surrogate, tau, delta, beta_max, cfg=None, **kwargs):
    if method == "chernoff":
        return calibrate_chernoff(table, surrogate, tau, delta, beta_max, cfg, **kwargs)
    if method == "bootstrap":
        return calibrate_bootstrap(table, surrogate, tau, delta, beta_max, cfg, **kwargs)
    raise ValueError(f"unknown calibration method {method!r}")


def bias_for_mean(table, surrogate, eps):
    """Smallest bias making the table-average signed distance at least ``eps``.

    Uses ``beta = (eps - mean(mu - f)) / mean(v)`` with ``v`` the bias
    multiplier of the surrogate, clipped at zero.
    """
    mu, v = _surrogate_terms(table, surrogate.with_bias(0.0))
    gap = float(np.mean(mu[:, None] - table.f_ik))
    denom = float(np.mean(v))
    if denom <= 0:
        raise ValueError("mean bias multiplier is not positive")
    return max(0.0, (eps - gap) / denom)


def saturation_bias(surrogate, y, fvals):
    """Bias above which ``mu_beta(y) > f`` at every given point.

    ``(max|mu| + max|f|) / min v`` over the supplied points, where ``v`` is the
    bias multiplier. Requires ``v > 0`` at all points.
    """
    mu, v = surrogate.with_bias(0.0).unbiased_and_weight(y)
    mu, v = np.atleast_1d(mu), np.atleast_1d(v)
    if np.min(v) <= 0:
        raise ValueError("bias multiplier is not positive at every point")
    return float((np.max(np.abs(mu)) + np.max(np.abs(fvals))) / np.min(v))


# --- validation on fresh samples ---------------------------------------------


@dataclass(frozen=True)
class ValidationSample:
    """Fresh points ``x ~ U(X)`` with their active coordinates and exact values.

    The exact evaluations are for validation only and are not part of the
    calibration budget.
    """

    x: np.ndarray
    y: np.ndarray
    f: np.ndarray

    @classmethod
    def draw(cls, asub, dom, f, n, seed):
        if n < 1:
            raise ValueError("n must be >= 1")
        x = dom.sample(n, _rng.make_rng(seed))
        fx = np.array([f(p) for p in x], dtype=float)
        return cls(x, asub.project(x), fx)


def empirical_conservativeness(surrogate, asub, dom, f, n, seed, *, sample=None):
    """Fraction of fresh points with ``mu_beta(W1^T x) >= f(x)``."""
    vs = sample or ValidationSample.draw(asub, dom, f, n, seed)
    mu = np.atleast_1d(surrogate.predict_mean(vs.y))
    return float(np.mean(mu >= vs.f))


@dataclass(frozen=True)
class UnfeasibilityReport:
    ratio: float
    feasible: int
    violating: int

    @property
    def empty_feasible_set(self):
        return self.feasible == 0


def unfeasibility_ratio(surrogate, asub, dom, g_exact, n, seed, *, sample=None):
    """Share of surrogate-feasible points (``mu_beta <= 0``) with ``g_exact >= 0``.

    ``ratio`` is NaN and ``empty_feasible_set`` is true when no sampled point
    is feasible for the surrogate.
    """
    vs = sample or ValidationSample.draw(asub, dom, g_exact, n, seed)
    mu = np.atleast_1d(surrogate.predict_mean(vs.y))
    feas = mu <= 0
    bad = feas & (vs.f >= 0)
    nf = int(feas.sum())
    ratio = float(bad.sum() / nf) if nf else float("nan")
    return UnfeasibilityReport(ratio, nf, int(bad.sum()))
