"""End-to-end construction of a reduced surrogate for one constraint.

``fit_constraint_model`` runs: gradient covariance -> active subspace ->
training locations -> signed-distance table (the only exact evaluations) ->
surrogate fit. Seeds for each stage come from :mod:`casm._rng` streams.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import _rng
from .active_subspace import decompose, estimate_covariance
from .conservative import CountingFunction, build_table
from .surrogate import fit_gpr, fit_hyperparameters, fit_linear

log = logging.getLogger(__name__)


@dataclass
class ConstraintModel:
    domain: object
    covariance: object
    subspace: object
    table: object
    training: object
    surrogate: object
    evaluations: int


def default_samples(D):
    return {"M": 100 * D, "N": 10}


def fit_constraint_model(
    src,
    dom,
    *,
    d=1,
    M=None,
    N=10,
    s=100,
    seed=0,
    kind="gpr",
    noise_policy="fit",
    burn_in=None,
    subspace=None,
):
    """Build the reduced surrogate of ``src`` on ``dom``.

    Parameters
    ----------
    src : GradientSource
        The constraint; its gradient is used only for the covariance estimate.
    kind : {"gpr", "linear"}
    subspace : ActiveSubspace, optional
        Reuse a precomputed subspace instead of estimating one.

    Returns a :class:`ConstraintModel` whose ``evaluations`` counts the calls
    to the constraint value made while filling the table (``s * N``).
    """
    M = 100 * dom.dim if M is None else M
    if subspace is None:
        cov = estimate_covariance(src, dom, M, _rng.stream_seed(seed, _rng.COVARIANCE))
        asub = decompose(cov, d)
    else:
        cov, asub = None, subspace
    x_tr = dom.sample(s, _rng.make_rng(seed, _rng.TRAINING))
    y_tr = asub.project(x_tr)
    counter = CountingFunction(src.value)
    # x_tr[k] lies in the slice above y_tr[k]; it seeds the chains there
    starts = x_tr if asub.W2.shape[1] > 1 else None
    table = build_table(asub, dom, counter, y_tr, N, _rng.stream_seed(seed, _rng.TABLE), starts=starts, burn_in=burn_in)
    training = table.training_set()
    if kind == "gpr":
        cfg = fit_hyperparameters(training, noise_policy)
        surrogate = fit_gpr(training, cfg)
    elif kind == "linear":
        surrogate = fit_linear(training)
    else:
        raise ValueError(f"unknown surrogate kind {kind!r}")
    log.info("constraint model: D=%d d=%d s=%d N=%d, %d evaluations", dom.dim, asub.d, s, N, counter.calls)
    return ConstraintModel(dom, cov, asub, table, training, surrogate, counter.calls)


def linear_objective_model(src, dom, *, M=None, seed=0, n_fit=None):
    """Active direction and exact linear surrogate for an objective with one dominant direction.

    The surrogate is fit on ``n_fit`` (default ``D + 2``, at least 10) points
    ``(W1^T x, F(x))``; it is exact when ``F`` is affine.
    """
    from .surrogate import TrainingSet

    M = max(2, dom.dim) if M is None else M
    cov = estimate_covariance(src, dom, M, _rng.stream_seed(seed, _rng.OBJECTIVE, 0))
    asub = decompose(cov, 1)
    n_fit = max(10, dom.dim + 2) if n_fit is None else n_fit
    x = dom.sample(n_fit, _rng.make_rng(seed, _rng.OBJECTIVE, 1))
    fx = np.array([src.value(p) for p in x])
    return asub, fit_linear(TrainingSet(asub.project(x), fx))
