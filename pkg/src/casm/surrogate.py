"""Gaussian-process and linear surrogates over active coordinates.

Both surrogate types carry a constant training bias ``beta``. For the GP the
bias enters the predictive mean through the kernel weight of the all-ones
vector, ``mu_beta(y) = mu(y) + beta * k(y, Y)(K + s2 I)^-1 1``, which is exactly
what retraining on ``f_tr + beta`` would give. For the linear model the shift
is additive.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize_scalar

from .errors import FactorizationError

log = logging.getLogger(__name__)

_JITTER_START = 1e-10
_JITTER_MAX = 1e-4


@dataclass(frozen=True)
class TrainingSet:
    """Projected points ``y_tr`` (s x d) and conditional averages ``f_tr``.

    Rows of ``y_tr`` closer than 1e-12 are merged and their values averaged.
    """

    y_tr: np.ndarray
    f_tr: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y_tr, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        f = np.asarray(self.f_tr, dtype=float).ravel()
        if y.shape[0] != f.size or f.size < 1:
            raise ValueError("y_tr and f_tr must have the same nonzero number of rows")
        y, f = _merge_duplicates(y, f)
        object.__setattr__(self, "y_tr", y)
        object.__setattr__(self, "f_tr", f)

    @property
    def size(self):
        return self.f_tr.size

    @property
    def dim(self):
        return self.y_tr.shape[1]


def _merge_duplicates(y, f):
    if y.shape[0] < 2:
        return y, f
    keep, vals, counts = [], [], []
    for i in range(y.shape[0]):
        for j, k in enumerate(keep):
            if np.max(np.abs(y[i] - y[k])) <= 1e-12:
                vals[j] += f[i]
                counts[j] += 1
                break
        else:
            keep.append(i)
            vals.append(f[i])
            counts.append(1)
    if len(keep) == y.shape[0]:
        return y, f
    return y[keep], np.asarray(vals) / np.asarray(counts)


@dataclass(frozen=True)
class KernelConfig:
    """Squared-exponential kernel ``exp(-theta |a - b|^2)`` plus noise variance."""

    theta: float = 1.0
    noise_var: float = 0.0

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if not self.noise_var >= 0:
            raise ValueError("noise_var must be nonnegative")


def kernel_eval(cfg, y1, y2):
    diff = np.atleast_1d(np.asarray(y1, dtype=float)) - np.atleast_1d(np.asarray(y2, dtype=float))
    return float(np.exp(-cfg.theta * np.dot(diff, diff)))


def _gram(theta, a, b):
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.exp(-theta * sq)


def _as_queries(y, d):
    y = np.asarray(y, dtype=float)
    single = y.ndim == 0 or (y.ndim == 1 and (d > 1 or y.size == 1) and y.size == d)
    if single:
        return y.reshape(1, d), True
    return y.reshape(-1, d), False


def _factor_with_jitter(A):
    """Lower Cholesky factor of ``A``, adding escalating diagonal jitter on failure."""
    scale = float(np.mean(np.diag(A))) or 1.0
    jitter = 0.0
    while True:
        try:
            L = cholesky(A + jitter * np.eye(A.shape[0]), lower=True)
            return L, jitter
        except LinAlgError:
            jitter = _JITTER_START * scale if jitter == 0.0 else jitter * 10.0
            if jitter > _JITTER_MAX * scale * (1 + 1e-12):
                raise FactorizationError(
                    "kernel matrix K + noise*I is not positive definite even with "
                    f"jitter {_JITTER_MAX:g}; the training points are too close for theta"
                ) from None


@dataclass(frozen=True)
class GprSurrogate:
    """Fitted GP regressor with a constant training bias.

    ``weights`` solves ``(K + s2 I) w = f_tr`` and ``ones_weights`` solves
    ``(K + s2 I) v = 1``; both share the Cholesky factor ``factor``.
    """

    training: TrainingSet
    kernel: KernelConfig
    weights: np.ndarray
    ones_weights: np.ndarray
    factor: np.ndarray
    bias: float = 0.0
    jitter: float = 0.0

    @property
    def d(self):
        return self.training.dim

    def with_bias(self, beta):
        if beta < 0:
            raise ValueError("bias must be nonnegative")
        return replace(self, bias=float(beta))

    def _kstar(self, y):
        Y, single = _as_queries(y, self.d)
        return _gram(self.kernel.theta, Y, self.training.y_tr), single

    def unbiased_and_weight(self, y):
        """``(mu(y), k(y, Y) v)``: the beta-free mean and the bias multiplier."""
        ks, single = self._kstar(y)
        mu, v = ks @ self.weights, ks @ self.ones_weights
        return (mu[0], v[0]) if single else (mu, v)

    def predict_mean(self, y):
        mu, v = self.unbiased_and_weight(y)
        return mu + self.bias * v

    def predict_var(self, y):
        ks, single = self._kstar(y)
        w = solve_triangular(self.factor, ks.T, lower=True)
        var = np.maximum(1.0 - np.sum(w * w, axis=0), 0.0)
        return var[0] if single else var

    def to_dict(self):
        return {
            "theta": self.kernel.theta,
            "noise_var": self.kernel.noise_var,
            "bias": self.bias,
            "y_tr": self.training.y_tr.tolist(),
            "f_tr": self.training.f_tr.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        tr = TrainingSet(np.asarray(data["y_tr"], dtype=float), np.asarray(data["f_tr"], dtype=float))
        model = fit_gpr(tr, KernelConfig(float(data["theta"]), float(data["noise_var"])))
        return model.with_bias(float(data.get("bias", 0.0)))

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def fit_gpr(tr, cfg):
    A = _gram(cfg.theta, tr.y_tr, tr.y_tr) + cfg.noise_var * np.eye(tr.size)
    L, jitter = _factor_with_jitter(A)
    if jitter:
        log.warning("added diagonal jitter %.1e to the kernel matrix", jitter)
    weights = cho_solve((L, True), tr.f_tr)
    ones_weights = cho_solve((L, True), np.ones(tr.size))
    return GprSurrogate(tr, cfg, weights, ones_weights, L, 0.0, jitter)


def predict_mean(m, y):
    return m.predict_mean(y)


def predict_var(m, y):
    return m.predict_var(y)


@dataclass(frozen=True)
class AssumptionReport:
    holds: bool
    min_row_sum: float
    row_sums: np.ndarray = field(repr=False, default=None)


def check_assumption_rowsums(m):
    """Check that every row of ``(K + s2 I)^-1`` sums to a nonnegative value.

    The row sums are the entries of ``ones_weights`` since the matrix is
    symmetric.
    """
    rs = np.asarray(m.ones_weights)
    return AssumptionReport(bool(np.min(rs) >= 0), float(np.min(rs)), rs.copy())


# --- hyperparameters ---------------------------------------------------------

_THETA_BOUNDS = (1e-3, 1e3)
_NOISE_BOUNDS = (1e-8, 1e1)
_GRID = 40


def _profile_loglik(y, f, theta, noise):
    """Log marginal likelihood with the signal amplitude profiled out.

    For ``f ~ N(0, a2 (K + noise I))`` the maximizing amplitude is
    ``a2 = f^T (K + noise I)^-1 f / s``; substituting it back leaves a function
    of ``theta`` and the noise-to-signal ratio only.
    """
    s = f.size
    A = _gram(theta, y, y) + noise * np.eye(s)
    try:
        c = cho_factor(A, lower=True)
    except LinAlgError:
        return -np.inf
    quad = float(f @ cho_solve(c, f))
    if quad <= 0:
        return -np.inf
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return -0.5 * s * np.log(quad / s) - 0.5 * logdet - 0.5 * s * (1.0 + np.log(2 * np.pi))


def _refine(fun, grid, j, xatol=1e-3 * np.log(10)):
    lo = grid[max(j - 1, 0)]
    hi = grid[min(j + 1, grid.size - 1)]
    res = minimize_scalar(fun, bounds=(lo, hi), method="bounded", options={"xatol": xatol})
    if res.fun <= fun(grid[j]):
        return float(res.x)
    return float(grid[j])


def fit_hyperparameters(tr, noise_policy=None):
    """Maximize the marginal likelihood over ``theta`` (and the noise if requested).

    Parameters
    ----------
    tr : TrainingSet
    noise_policy : None, float or "fit"
        ``None`` fixes the noise at ``1e-4 * var(f_tr)``; a float fixes it at
        that value; ``"fit"`` searches it jointly with ``theta``.

    The search evaluates a 40-point log grid on ``theta in [1e-3, 1e3]`` (and on
    the noise ratio in ``[1e-8, 10]``) and refines the best cell with a bounded
    scalar minimizer to a relative tolerance of 1e-3.
    """
    if tr.size < 3:
        raise ValueError("at least 3 training points are needed to fit hyperparameters")
    y, f = tr.y_tr, tr.f_tr
    fit_noise = isinstance(noise_policy, str)
    if fit_noise and noise_policy != "fit":
        raise ValueError(f"unknown noise policy {noise_policy!r}")
    if noise_policy is None or fit_noise:
        default_noise = 1e-4 * float(np.var(f))
    else:
        default_noise = float(noise_policy)
    if np.ptp(f) <= 1e-12 * max(1.0, float(np.max(np.abs(f)))):
        warnings.warn("constant training values; using theta=1", RuntimeWarning, stacklevel=2)
        return KernelConfig(1.0, default_noise)

    log_t = np.linspace(*np.log(_THETA_BOUNDS), _GRID)
    if not fit_noise:

        def nll(lt):
            return -_profile_loglik(y, f, np.exp(lt), default_noise)

        vals = np.array([nll(t) for t in log_t])
        j = int(np.argmin(vals))
        return KernelConfig(float(np.exp(_refine(nll, log_t, j))), default_noise)

    log_n = np.linspace(*np.log(_NOISE_BOUNDS), _GRID)
    table = np.array([[-_profile_loglik(y, f, np.exp(t), np.exp(n)) for n in log_n] for t in log_t])
    jt, jn = np.unravel_index(int(np.argmin(table)), table.shape)
    lt, ln = float(log_t[jt]), float(log_n[jn])
    for _ in range(3):
        lt = _refine(lambda t: -_profile_loglik(y, f, np.exp(t), np.exp(ln)), log_t, int(np.argmin(np.abs(log_t - lt))))
        ln = _refine(lambda n: -_profile_loglik(y, f, np.exp(lt), np.exp(n)), log_n, int(np.argmin(np.abs(log_n - ln))))
    return KernelConfig(float(np.exp(lt)), float(np.exp(ln)))


# --- linear surrogate --------------------------------------------------------


@dataclass(frozen=True)
class LinearSurrogate:
    slope: np.ndarray
    intercept: float
    bias: float = 0.0

    @property
    def d(self):
        return np.atleast_1d(self.slope).size

    def with_bias(self, beta):
        if beta < 0:
            raise ValueError("bias must be nonnegative")
        return replace(self, bias=float(beta))

    def unbiased_and_weight(self, y):
        Y, single = _as_queries(y, self.d)
        mu = Y @ np.atleast_1d(self.slope) + self.intercept
        v = np.ones_like(mu)
        return (mu[0], v[0]) if single else (mu, v)

    def predict_mean(self, y):
        mu, v = self.unbiased_and_weight(y)
        return mu + self.bias * v

    predict = predict_mean

    def to_dict(self):
        return {"slope": np.atleast_1d(self.slope).tolist(), "intercept": self.intercept, "bias": self.bias}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["slope"], dtype=float), float(data["intercept"]), float(data.get("bias", 0.0)))


def fit_linear(tr):
    """Ordinary least squares ``f ~ slope^T y + intercept``."""
    s, d = tr.y_tr.shape
    if s < d + 1:
        raise ValueError(f"need at least d+1={d + 1} training points, got {s}")
    X = np.hstack([tr.y_tr, np.ones((s, 1))])
    coef, _, rank, _ = np.linalg.lstsq(X, tr.f_tr, rcond=None)
    if rank < d + 1:
        raise np.linalg.LinAlgError("rank-deficient design matrix for the linear fit")
    return LinearSurrogate(coef[:d], float(coef[d]))


def predict_linear(m, y):
    return m.predict_mean(y)
