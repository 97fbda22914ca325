"""End-to-end conservative design of the two-material heat conductor.

Design problem: minimize the volume of the stiff material subject to
``E(theta) <= E_max`` with ``theta in [0, 1]^D`` one value per element. The
subspace machinery works on ``x in [-1, 1]^D`` with ``theta = (x + 1) / 2``.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _rng
from .active_subspace import Domain, GradientSource
from .conservative import TailBoundConfig, calibrate_chernoff
from .errors import CalibrationError, InfeasibleProblemError
from .fem import ThermalModel
from .pipeline import fit_constraint_model
from .reduced_optimize import ReducedProblem, solve_full, solve_reduced
from .surrogate import LinearSurrogate

log = logging.getLogger(__name__)


@dataclass
class ThermalConfig:
    n: int = 16
    e_max: float = 1.22
    k1: float = 2.0
    k2: float = 1.0
    samples_m: int = 200
    train_s: int = 50
    samples_n: int = 4
    burn_in: int = 1000
    i_values: tuple = (3, 4, 5, 6)
    beta_max: float = 1.0
    bootstrap_b: int = 2000
    chernoff_u_max: float = 1e2
    seed: int = 0
    grid_points: int = 401
    run_full: bool = True


@dataclass
class ThermalRow:
    label: str
    tau: float
    beta: float
    objective_min: float
    energy: float
    exact_violation_pct: float
    iterations: int = 0
    status: str = "ok"


@dataclass
class ThermalReport:
    config: dict
    eigenvalues: list
    eigenvector: list
    surrogate: dict
    evaluations: int
    rows: list = field(default_factory=list)
    full: dict = None
    warnings: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    # optimal theta per row label (and "Full-size"); kept out of the JSON report
    designs: dict = field(default_factory=dict, repr=False)

    def to_dict(self, timings=False):
        out = {
            "config": self.config,
            "eigenvalues": self.eigenvalues,
            "eigenvector": self.eigenvector,
            "surrogate": self.surrogate,
            "evaluations": self.evaluations,
            "rows": [asdict(r) for r in self.rows],
            "full": self.full,
            "warnings": self.warnings,
        }
        if timings:
            out["timings"] = self.timings
        return out

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def row(self, label):
        return next(r for r in self.rows if r.label == label)


class ScaledThermal:
    """Energy constraint and volume objective as functions of ``x in [-1, 1]^D``."""

    def __init__(self, model, e_max):
        self.model = model
        self.e_max = e_max
        self.domain = Domain.cube(model.dim)

    @staticmethod
    def theta(x):
        return 0.5 * (np.asarray(x, dtype=float) + 1.0)

    def constraint(self, x):
        e, g = self.model.energy_and_grad(self.theta(x))
        return e - self.e_max, 0.5 * g

    def constraint_grad(self, x):
        return self.constraint(x)[1]

    def constraint_value(self, x):
        return self.model.energy(self.theta(x)) - self.e_max

    def objective(self, x):
        v, g = self.model.volume_and_grad(self.theta(x))
        return v, 0.5 * g


def _violation_pct(energy, e_max):
    return 100.0 * max(0.0, energy - e_max) / e_max


def volume_surrogate(model):
    """Exact reduced volume: ``V = c^T x + sum(a)/2`` with direction ``c / |c|``."""
    c = 0.5 * model.mesh.areas
    norm = float(np.linalg.norm(c))
    U1 = (c / norm)[:, None]
    return U1, LinearSurrogate(np.array([norm]), float(c.sum()))


def run_thermal_pipeline(cfg=None):
    """Spectrum, linear constraint profile, Chernoff ladder, reduced optima and baseline.

    Rows of the report: ``ASM`` (no bias) and ``CASM i`` for every ``i`` in
    ``cfg.i_values`` with ``tau = 1 - 10^-i`` and tolerance ``10^-(i+1)``,
    followed by the full-size baseline in ``report.full`` when requested.
    """
    cfg = cfg or ThermalConfig()
    clock = {}
    t0 = time.perf_counter()
    model = ThermalModel(cfg.n, cfg.k1, cfg.k2)
    prob = ScaledThermal(model, cfg.e_max)
    dom = prob.domain
    src = GradientSource(prob.constraint_value, prob.constraint_grad)

    fitted = fit_constraint_model(
        src,
        dom,
        d=1,
        M=cfg.samples_m,
        N=cfg.samples_n,
        s=cfg.train_s,
        seed=cfg.seed,
        kind="linear",
        burn_in=cfg.burn_in,
    )
    clock["fit"] = time.perf_counter() - t0
    asub = fitted.subspace
    U1, vol = volume_surrogate(model)
    warnings_out = []
    designs = {}

    def evaluate(label, tau, beta, iters=0):
        g = fitted.surrogate.with_bias(beta)
        rp = ReducedProblem(vol, U1, g, asub.W1, dom)
        try:
            sol = solve_reduced(rp, cfg.grid_points)
        except InfeasibleProblemError as exc:
            warnings_out.append(f"{label}: {exc}")
            return ThermalRow(label, tau, beta, float("nan"), float("nan"), float("nan"), iters, "infeasible")
        designs[label] = prob.theta(sol.x_star)
        e = model.energy(designs[label])
        return ThermalRow(label, tau, beta, model.volume(prob.theta(sol.x_star)), e,
                          _violation_pct(e, cfg.e_max), iters)

    tail = TailBoundConfig(bootstrap_resamples=cfg.bootstrap_b, u_max=cfg.chernoff_u_max)
    rows = [evaluate("ASM", float("nan"), 0.0)]
    for i in cfg.i_values:
        tau, delta = 1.0 - 10.0**-i, 10.0 ** -(i + 1)
        try:
            cal = calibrate_chernoff(
                fitted.table, fitted.surrogate, tau, delta, cfg.beta_max, tail,
                seed=_rng.stream_seed(cfg.seed, _rng.CALIBRATION, i),
            )
        except CalibrationError as exc:
            warnings_out.append(f"CASM {i}: {exc}")
            rows.append(ThermalRow(f"CASM {i}", tau, float("nan"), float("nan"), float("nan"), float("nan"), 0,
                                   exc.reason))
            continue
        warnings_out.extend(f"CASM {i}: {w}" for w in cal.warnings)
        rows.append(evaluate(f"CASM {i}", tau, cal.beta, cal.iterations))
    clock["ladder"] = time.perf_counter() - t0 - clock["fit"]

    full = None
    if cfg.run_full:
        t1 = time.perf_counter()
        x0 = np.zeros(dom.dim)
        res = solve_full(prob.objective, prob.constraint, dom, x0=x0)
        designs["Full-size"] = prob.theta(res.x_star)
        e = model.energy(designs["Full-size"])
        full = {
            "objective_min": model.volume(prob.theta(res.x_star)),
            "energy": e,
            "exact_violation_pct": _violation_pct(e, cfg.e_max),
            "converged": res.converged,
            "kkt_residual": res.kkt_residual,
            "iterations": res.iterations,
        }
        if not res.converged:
            warnings_out.append(f"full-size solve stopped with KKT residual {res.kkt_residual:.2e}")
        clock["full"] = time.perf_counter() - t1

    return ThermalReport(
        config=asdict(cfg) | {"i_values": list(cfg.i_values)},
        eigenvalues=asub.eigenvalues.tolist(),
        eigenvector=asub.W1[:, 0].tolist(),
        surrogate=fitted.surrogate.to_dict(),
        evaluations=fitted.evaluations,
        rows=rows,
        full=full,
        warnings=warnings_out,
        timings=clock,
        designs=designs,
    )

