"""Oracles and callables shared by the tests (also importable by custom CLI configs)."""

import itertools

import numpy as np
from numpy.polynomial.legendre import leggauss


def gauss_box_mean(fun, lower, upper, order=12):
    """Mean of ``fun`` over a box by tensor Gauss-Legendre quadrature.

    ``fun`` takes an ``(n, D)`` array and returns an array with leading axis ``n``.
    """
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    t, w = leggauss(order)
    D = lower.size
    nodes = np.array(list(itertools.product(t, repeat=D)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=D))), axis=1)
    x = lower + (nodes + 1) * (upper - lower) / 2
    vals = fun(x)
    return np.tensordot(weights, vals, axes=(0, 0)) / 2**D


def least_norm_box_oracle(A, b, lower, upper, tol=1e-12):
    """Exact ``argmin |x|^2 s.t. Ax = b, lower <= x <= upper`` by enumerating active sets.

    Every coordinate is assigned to its lower bound, upper bound or the free
    set; the free part takes the least-norm solution of the remaining
    equalities. The best candidate that satisfies all constraints wins. Cost is
    ``3^D`` small solves, so keep ``D`` small.
    """
    D = A.shape[1]
    best, best_norm = None, np.inf
    for pattern in itertools.product((0, 1, 2), repeat=D):
        pattern = np.array(pattern)
        x = np.where(pattern == 0, lower, np.where(pattern == 1, upper, 0.0))
        free = pattern == 2
        rhs = b - A[:, ~free] @ x[~free]
        if free.any():
            Af = A[:, free]
            sol, *_ = np.linalg.lstsq(Af, rhs, rcond=None)
            x[free] = sol
        if np.linalg.norm(A @ x - b) > 1e-9 or np.any(x < lower - tol) or np.any(x > upper + tol):
            continue
        n = x @ x
        if n < best_norm - 1e-14:
            best, best_norm = x, n
    return best


def constant_function(x):
    return 1.0


def constant_with_grad(x):
    x = np.asarray(x, dtype=float)
    return 1.0, np.zeros_like(x)


def quadratic_constraint(x):
    """``|x|^2 - 1`` with gradient, for custom-problem CLI runs."""
    x = np.asarray(x, dtype=float)
    return float(x @ x - 1.0), 2.0 * x


def sum_objective(x):
    x = np.asarray(x, dtype=float)
    return float(x.sum()), np.ones_like(x)


# one line per acceptance criterion, printed in the pytest terminal summary
ACCEPTANCE_LINES = {}
