"""Problem definitions: the two-variable quadratic test case, the heat conductor and user-supplied constraints."""

import importlib
from dataclasses import dataclass, field

import numpy as np

from .active_subspace import Domain, GradientSource


def toy_constraint(x):
    """``G(x) = (x1 + 2 x2)^2 + x1 - x2 - 3`` and its gradient."""
    x = np.asarray(x, dtype=float)
    t = x[..., 0] + 2.0 * x[..., 1]
    val = t * t + x[..., 0] - x[..., 1] - 3.0
    grad = np.stack([2.0 * t + 1.0, 4.0 * t - 1.0], axis=-1)
    return val, grad


def toy_value(x):
    return float(toy_constraint(x)[0])


def toy_objective(x):
    """Linear objective ``x1 + x2`` paired with the toy constraint."""
    x = np.asarray(x, dtype=float)
    return float(x[0] + x[1]), np.array([1.0, 1.0])


def toy_domain():
    return Domain.cube(2)


def toy_source():
    return GradientSource.analytic(toy_constraint)



def toy_objective_surrogate():
    """Exact reduced form of ``x1 + x2``: direction ``(1, 1)/sqrt(2)``, slope ``sqrt(2)``."""
    from .surrogate import LinearSurrogate

    U1 = np.array([[1.0], [1.0]]) / np.sqrt(2.0)
    return U1, LinearSurrogate(np.array([np.sqrt(2.0)]), 0.0)


@dataclass
class Problem:
    """A constraint ``g(x) <= 0`` on a box, with what the pipelines need to handle it.

    ``violation_scale`` turns ``max(0, g)`` into a percentage in optimization
    reports; ``objective`` returns ``(value, gradient)`` and ``objective_reduced``
    returns ``(U1, surrogate)`` when optimization is supported.
    """

    name: str
    domain: Domain
    source: GradientSource
    value: object
    surrogate_kind: str = "gpr"
    burn_in: int = None
    violation_scale: float = 1.0
    objective: object = None
    objective_reduced: object = None
    batch_value: object = None
    extra: dict = field(default_factory=dict)


def toy_problem():
    return Problem(
        "toy",
        toy_domain(),
        toy_source(),
        toy_value,
        violation_scale=3.0,
        objective=toy_objective,
        objective_reduced=toy_objective_surrogate,
        batch_value=lambda x: toy_constraint(x)[0],
    )


def thermal_problem(n=16, e_max=None):
    from .thermal import ScaledThermal, ThermalConfig, volume_surrogate
    from .fem import ThermalModel

    e_max = ThermalConfig.e_max if e_max is None else float(e_max)
    model = ThermalModel(n)
    prob = ScaledThermal(model, e_max)
    return Problem(
        "thermal",
        prob.domain,
        GradientSource(prob.constraint_value, prob.constraint_grad),
        prob.constraint_value,
        surrogate_kind="linear",
        burn_in=ThermalConfig.burn_in,
        violation_scale=e_max,
        objective=prob.objective,
        objective_reduced=lambda: volume_surrogate(model),
        extra={"model": model, "e_max": e_max, "n": n},
    )


def _load_callable(ref):
    mod_name, sep, attr = str(ref).partition(":")
    if not sep or not mod_name or not attr:
        raise ValueError(f"callable reference {ref!r} must look like 'module:name'")
    obj = importlib.import_module(mod_name)
    for part in attr.split("."):
        obj = getattr(obj, part)
    if not callable(obj):
        raise ValueError(f"{ref!r} is not callable")
    return obj


def custom_problem(spec):
    """Problem from a mapping with keys ``callable``, ``lower``, ``upper`` and optionally
    ``gradient`` (``"returns"`` when the callable returns ``(value, grad)``, a
    ``module:name`` reference to a separate gradient, or ``"fd"``),
    ``surrogate`` (``"gpr"`` or ``"linear"``), ``objective`` and ``violation_scale``.
    """
    fun = _load_callable(spec["callable"])
    dom = Domain(np.asarray(spec["lower"], dtype=float), np.asarray(spec["upper"], dtype=float))
    grad = spec.get("gradient", "fd")
    if grad == "returns":
        src = GradientSource.analytic(fun)
    elif grad == "fd":
        src = GradientSource.finite_difference(fun)
    else:
        src = GradientSource(fun, _load_callable(grad))
    objective = objective_reduced = None
    if spec.get("objective"):
        objective = _load_callable(spec["objective"])

        def objective_reduced():
            from .pipeline import linear_objective_model

            asub, sur = linear_objective_model(GradientSource.analytic(objective), dom)
            return asub.W1, sur

    return Problem(
        "custom",
        dom,
        src,
        src.value,
        surrogate_kind=spec.get("surrogate", "gpr"),
        violation_scale=float(spec.get("violation_scale", 1.0)),
        objective=objective,
        objective_reduced=objective_reduced,
    )
