"""Command-line front end.

Subcommands ``spectrum``, ``calibrate``, ``feasibility`` and ``optimize``
write CSV/JSON files into the output directory. Identical flags and seed give
byte-identical files; wall-clock timings go to ``timings.json`` only.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 calibration infeasible.
"""

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from . import _rng
from .active_subspace import decompose, estimate_covariance, write_eigenvalues_csv
from .conservative import (
    TailBoundConfig,
    ValidationSample,
    calibrate,
    empirical_conservativeness,
    sample_signed_distance,
    unfeasibility_ratio,
)
from .errors import CalibrationError, CasmError, ConfigError, InfeasibleProblemError
from .pipeline import fit_constraint_model
from .reduced_optimize import ReducedProblem, solve_full, solve_reduced

log = logging.getLogger("casm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CALIBRATION = 0, 2, 3, 4

# per-problem defaults; None entries in a RunConfig are filled from here
PROBLEM_DEFAULTS = {
    "toy": {"M": 200, "N": 10, "s": 100, "validation_n": 10000, "beta_max": 10.0},
    "thermal": {"M": 200, "N": 4, "s": 50, "validation_n": 1000, "beta_max": 1.0},
    "custom": {"M": None, "N": 10, "s": 100, "validation_n": 10000, "beta_max": 10.0},
}

SAMPLE_KEYS = ("M", "N", "s", "K", "B", "validation_n")


@dataclass
class Samples:
    M: int = None
    N: int = None
    s: int = None
    K: int = None
    B: int = 2000
    validation_n: int = None


@dataclass
class RunConfig:
    problem: str = "toy"
    tau: float = 0.95
    delta: float = 0.01
    beta_max: float = None
    method: str = "chernoff"
    seed: int = 0
    samples: Samples = field(default_factory=Samples)
    output_dir: str = "casm-out"
    mesh_n: int = 16
    emax: float = None
    i_values: list = field(default_factory=lambda: [3, 4, 5, 6])
    custom: dict = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        samples = data.pop("samples", None) or {}
        if not isinstance(samples, dict):
            raise ConfigError("'samples' must be an object")
        bad = set(samples) - set(SAMPLE_KEYS)
        if bad:
            raise ConfigError(f"unknown sample keys: {sorted(bad)}")
        return cls(samples=Samples(**samples), **data)

    def resolved(self):
        """Copy with problem-dependent defaults filled in, validated."""
        if self.problem not in PROBLEM_DEFAULTS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose toy, thermal or custom")
        out = copy.deepcopy(self)
        defaults = PROBLEM_DEFAULTS[self.problem]
        for key in ("M", "N", "s", "validation_n"):
            if getattr(out.samples, key) is None:
                setattr(out.samples, key, defaults[key])
        if out.beta_max is None:
            out.beta_max = defaults["beta_max"]
        out.validate()
        return out

    def validate(self):
        try:
            self.tau, self.delta, self.beta_max = float(self.tau), float(self.delta), float(self.beta_max)
            self.seed, self.mesh_n = int(self.seed), int(self.mesh_n)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad numeric value: {exc}") from None
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if not self.beta_max > 0:
            raise ConfigError("beta_max must be positive")
        if self.method not in ("chernoff", "bootstrap"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        for key in SAMPLE_KEYS:
            v = getattr(self.samples, key)
            if v is not None and (int(v) != v or v < 1):
                raise ConfigError(f"samples.{key} must be a positive integer")
        if self.samples.B < 100:
            raise ConfigError("samples.B must be >= 100")
        if self.problem == "thermal" and self.mesh_n < 2:
            raise ConfigError("mesh_n must be >= 2")
        if self.emax is not None and not float(self.emax) > 0:
            raise ConfigError("emax must be positive")
        if self.problem == "custom":
            if not isinstance(self.custom, dict) or not {"callable", "lower", "upper"} <= set(self.custom):
                raise ConfigError("custom problems need a 'custom' object with callable, lower and upper")


# --- output helpers -----------------------------------------------------------


def _num(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.17e}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, str) else _num(c) for c in row])


def _clean(obj):
    """JSON-safe copy: NaN and infinities become null, numpy scalars become Python ones."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(data), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def load_report_schema():
    return json.loads(resources.files("casm").joinpath("schemas/report.schema.json").read_text(encoding="utf-8"))


@dataclass
class RunReport:
    command: str
    status: str
    config: dict
    calibration: dict = None
    conservativeness_observed: float = None
    ur: float = None
    optimum: dict = None
    rows: list = None
    evaluations: int = None
    warnings: list = field(default_factory=list)
    timings: str = "timings.json"

    def to_dict(self):
        return _clean(asdict(self))

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def write(self, out_dir):
        _write_json(os.path.join(out_dir, "report.json"), self.to_dict())


# --- problem setup --------------------------------------------------------------


def build_problem(cfg):
    from .problems import custom_problem, thermal_problem, toy_problem

    if cfg.problem == "toy":
        return toy_problem()
    if cfg.problem == "thermal":
        return thermal_problem(cfg.mesh_n, cfg.emax)
    try:
        return custom_problem(cfg.custom)
    except (ImportError, AttributeError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load custom problem: {exc}") from exc


def _fit(cfg, problem):
    s = cfg.samples
    return fit_constraint_model(
        problem.source,
        problem.domain,
        d=1,
        M=s.M,
        N=s.N,
        s=s.s,
        seed=cfg.seed,
        kind=problem.surrogate_kind,
        burn_in=problem.burn_in,
    )


def _calibrate(cfg, model, warnings_out):
    tail = TailBoundConfig(bootstrap_resamples=cfg.samples.B)
    cal_seed = _rng.stream_seed(cfg.seed, _rng.CALIBRATION)
    cal = calibrate(
        cfg.method, model.table, model.surrogate, cfg.tau, cfg.delta, cfg.beta_max, tail, K=cfg.samples.K, seed=cal_seed
    )
    warnings_out.extend(cal.warnings)
    return cal, cal_seed


def _validate(cfg, problem, model, beta):
    vs = ValidationSample.draw(
        model.subspace, problem.domain, problem.value, cfg.samples.validation_n, _rng.stream_seed(cfg.seed, _rng.VALIDATION)
    )
    sur = model.surrogate.with_bias(beta)
    cons = empirical_conservativeness(sur, model.subspace, problem.domain, None, 0, 0, sample=vs)
    ur = unfeasibility_ratio(sur, model.subspace, problem.domain, None, 0, 0, sample=vs)
    return vs, cons, ur


# --- commands ---------------------------------------------------------------------


def cmd_spectrum(cfg, out_dir, clock):
    problem = build_problem(cfg)
    M = 100 * problem.domain.dim if cfg.samples.M is None else cfg.samples.M
    cov = estimate_covariance(problem.source, problem.domain, M, _rng.stream_seed(cfg.seed, _rng.COVARIANCE))
    if not np.any(cov.matrix):
        raise NumericalFailure("constant function: every sampled gradient is zero, the spectrum is empty")
    asub = decompose(cov, 1)
    clock.lap("spectrum")
    write_eigenvalues_csv(os.path.join(out_dir, "eigenvalues.csv"), asub.eigenvalues)
    _write_json(os.path.join(out_dir, "subspace.json"), asub.to_dict())
    lam = asub.eigenvalues
    ratio = float(lam[0] / lam[1]) if lam[1] > 0 else float("inf")
    print(f"{problem.name}: D={asub.dim}, lambda1={lam[0]:.6g}, lambda2={lam[1]:.6g}, ratio={ratio:.4g}")
    return EXIT_OK


def _calibration_outputs(cfg, problem, model, cal, cal_seed, out_dir):
    _write_csv(
        os.path.join(out_dir, "trace.csv"),
        ["iteration", "beta", "estimate"],
        [(i, b, e) for i, (b, e) in enumerate(cal.trace)],
    )
    final = sample_signed_distance(
        model.table, model.surrogate.with_bias(cal.beta), cfg.samples.K, _rng.stream_seed(cal_seed, cal.iterations - 1, 0)
    )
    _write_csv(os.path.join(out_dir, "samples.csv"), ["index", "signed_distance"], list(enumerate(final.values)))


def _calibration_failed(cfg, command, exc, out_dir, evaluations, warnings_out):
    _write_csv(
        os.path.join(out_dir, "trace.csv"), ["iteration", "beta", "estimate"], [(i, b, e) for i, (b, e) in enumerate(exc.trace)]
    )
    RunReport(
        command,
        f"calibration_infeasible:{exc.reason}",
        cfg.to_dict(),
        {"error": str(exc), "reason": exc.reason, "trace": [list(t) for t in exc.trace]},
        evaluations=evaluations,
        warnings=warnings_out,
    ).write(out_dir)
    print(f"calibration infeasible: {exc}", file=sys.stderr)
    return EXIT_CALIBRATION


def cmd_calibrate(cfg, out_dir, clock):
    problem = build_problem(cfg)
    model = _fit(cfg, problem)
    clock.lap("fit")
    warnings_out = []
    try:
        cal, cal_seed = _calibrate(cfg, model, warnings_out)
    except CalibrationError as exc:
        return _calibration_failed(cfg, "calibrate", exc, out_dir, model.evaluations, warnings_out)
    clock.lap("calibrate")
    _, cons, ur = _validate(cfg, problem, model, cal.beta)
    clock.lap("validate")
    _calibration_outputs(cfg, problem, model, cal, cal_seed, out_dir)
    RunReport(
        "calibrate", "ok", cfg.to_dict(), cal.to_dict(), cons, ur.ratio, evaluations=model.evaluations, warnings=warnings_out
    ).write(out_dir)
    print(
        f"{problem.name} {cfg.method} tau={cfg.tau:g}: beta={cal.beta:.6g} after {cal.iterations} iterations, "
        f"observed conservativeness={cons:.4f}, UR={ur.ratio:.4f}"
    )
    return EXIT_OK


def cmd_feasibility(cfg, out_dir, clock):
    problem = build_problem(cfg)
    model = _fit(cfg, problem)
    warnings_out = []
    try:
        cal, cal_seed = _calibrate(cfg, model, warnings_out)
    except CalibrationError as exc:
        return _calibration_failed(cfg, "feasibility", exc, out_dir, model.evaluations, warnings_out)
    clock.lap("calibrate")
    _, cons, ur = _validate(cfg, problem, model, cal.beta)
    _, cons0, ur0 = _validate(cfg, problem, model, 0.0)
    stats = {
        "beta": cal.beta,
        "conservativeness_observed": cons,
        "ur": ur.ratio,
        "surrogate_feasible": ur.feasible,
        "violating": ur.violating,
        "conservativeness_observed_beta0": cons0,
        "ur_beta0": ur0.ratio,
    }
    if problem.domain.dim == 2 and problem.batch_value is not None:
        lo, hi = problem.domain.lower, problem.domain.upper
        t1, t2 = np.linspace(lo[0], hi[0], 201), np.linspace(lo[1], hi[1], 201)
        X1, X2 = np.meshgrid(t1, t2, indexing="ij")
        pts = np.column_stack([X1.ravel(), X2.ravel()])
        y = model.subspace.project(pts)
        g = problem.batch_value(pts)
        s0 = model.surrogate.with_bias(0.0).predict_mean(y)
        sb = model.surrogate.with_bias(cal.beta).predict_mean(y)
        _write_csv(
            os.path.join(out_dir, "feasibility_grid.csv"),
            ["x1", "x2", "G_exact", "G_surrogate_beta0", "G_surrogate_beta"],
            zip(pts[:, 0], pts[:, 1], g, s0, sb),
        )
        stats["grid_points"] = int(pts.shape[0])
    else:
        warnings_out.append("feasibility grid is only written for two-dimensional problems")
    _write_json(os.path.join(out_dir, "feasibility.json"), stats)
    RunReport(
        "feasibility", "ok", cfg.to_dict(), cal.to_dict(), cons, ur.ratio, evaluations=model.evaluations,
        warnings=warnings_out,
    ).write(out_dir)
    print(f"{problem.name}: beta={cal.beta:.6g}, observed conservativeness={cons:.4f}, UR={ur.ratio:.4f}")
    return EXIT_OK


def _violation_pct(problem, g):
    return 100.0 * max(0.0, g) / problem.violation_scale


def _table2(out_dir, rows):
    _write_csv(
        os.path.join(out_dir, "table2.csv"),
        ["problem", "beta", "objective_min", "exact_violation_pct"],
        [(r["problem"], r["beta"], r["objective_min"], r["exact_violation_pct"]) for r in rows],
    )


def _optimize_thermal(cfg, out_dir, clock):
    from .thermal import ThermalConfig, run_thermal_pipeline

    tc = ThermalConfig(
        n=cfg.mesh_n,
        e_max=ThermalConfig.e_max if cfg.emax is None else float(cfg.emax),
        samples_m=cfg.samples.M,
        train_s=cfg.samples.s,
        samples_n=cfg.samples.N,
        i_values=tuple(int(i) for i in cfg.i_values),
        beta_max=cfg.beta_max,
        bootstrap_b=cfg.samples.B,
        seed=cfg.seed,
    )
    rep = run_thermal_pipeline(tc)
    clock.laps.update(rep.timings)
    rows = [
        {"problem": "Full-size", "beta": None, "objective_min": rep.full["objective_min"],
         "exact_violation_pct": rep.full["exact_violation_pct"], "status": "ok" if rep.full["converged"] else "unconverged"}
    ]
    for r in rep.rows:
        rows.append({"problem": r.label, "beta": r.beta, "objective_min": r.objective_min,
                     "exact_violation_pct": r.exact_violation_pct, "status": r.status, "tau": r.tau,
                     "iterations": r.iterations})
    _table2(out_dir, rows)
    labels = list(rep.designs)
    _write_csv(
        os.path.join(out_dir, "designs.csv"),
        ["element", *(lab.replace(" ", "_") for lab in labels)],
        [(e, *(rep.designs[lab][e] for lab in labels)) for e in range(tc.n * tc.n * 2)],
    )
    _write_json(os.path.join(out_dir, "thermal_report.json"), rep.to_dict())
    RunReport("optimize", "ok", cfg.to_dict(), optimum=rep.full, rows=rows, evaluations=rep.evaluations,
              warnings=rep.warnings).write(out_dir)
    for r in rows:
        print(f"{r['problem']:>10s}  beta={_fmt(r['beta'])}  V={_fmt(r['objective_min'])}  "
              f"violation={_fmt(r['exact_violation_pct'])}%")
    return EXIT_OK


def _fmt(v):
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6g}"


def cmd_optimize(cfg, out_dir, clock):
    if cfg.problem == "thermal":
        return _optimize_thermal(cfg, out_dir, clock)
    problem = build_problem(cfg)
    if problem.objective is None:
        raise ConfigError("this problem has no objective; give 'custom.objective' to optimize")
    model = _fit(cfg, problem)
    warnings_out = []
    U1, obj = problem.objective_reduced()
    dom = problem.domain

    full = solve_full(problem.objective, lambda x: problem.source.evaluate(x, dom), dom)
    rows = [{"problem": "Full-size", "beta": None, "objective_min": full.value,
             "exact_violation_pct": _violation_pct(problem, problem.value(full.x_star)),
             "status": "ok" if full.converged else "unconverged"}]
    betas = [("ASM", 0.0, None)]
    try:
        cal, _ = _calibrate(cfg, model, warnings_out)
        betas.append(("CASM", cal.beta, cal))
    except CalibrationError as exc:
        warnings_out.append(f"CASM: {exc}")
        rows_cal = {"problem": "CASM", "beta": None, "objective_min": None, "exact_violation_pct": None,
                    "status": f"calibration_infeasible:{exc.reason}"}
        betas.append(("CASM", None, rows_cal))
    optimum = None
    for label, beta, extra in betas:
        if beta is None:
            rows.append(extra)
            continue
        rp = ReducedProblem(obj, U1, model.surrogate.with_bias(beta), model.subspace.W1, dom)
        try:
            sol = solve_reduced(rp)
        except InfeasibleProblemError as exc:
            warnings_out.append(f"{label}: {exc}")
            rows.append({"problem": label, "beta": beta, "objective_min": None, "exact_violation_pct": None,
                         "status": "infeasible"})
            continue
        g = problem.value(sol.x_star)
        sol.constraint_value_exact = g
        rows.append({"problem": label, "beta": beta, "objective_min": sol.objective_value,
                     "exact_violation_pct": _violation_pct(problem, g), "status": "ok"})
        optimum = sol.to_dict()
    clock.lap("optimize")
    _table2(out_dir, rows)
    cal_dict = betas[1][2].to_dict() if betas[1][1] is not None else None
    RunReport("optimize", "ok", cfg.to_dict(), cal_dict, optimum=optimum, rows=rows, evaluations=model.evaluations,
              warnings=warnings_out).write(out_dir)
    for r in rows:
        print(f"{r['problem']:>10s}  beta={_fmt(r['beta'])}  objective={_fmt(r['objective_min'])}  "
              f"violation={_fmt(r['exact_violation_pct'])}%  {r['status']}")
    return EXIT_OK


COMMANDS = {
    "spectrum": cmd_spectrum,
    "calibrate": cmd_calibrate,
    "feasibility": cmd_feasibility,
    "optimize": cmd_optimize,
}


class NumericalFailure(CasmError):
    pass


class Stopwatch:
    """Named durations between successive laps."""

    def __init__(self):
        self.start = self._last = time.perf_counter()
        self.laps = {}

    def lap(self, name):
        now = time.perf_counter()
        self.laps[name] = now - self._last
        self._last = now

    def total(self):
        return time.perf_counter() - self.start


# --- argument handling ------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="casm", description="Conservative active-subspace surrogates.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON file mirroring the run configuration")
    p.add_argument("--problem", choices=sorted(PROBLEM_DEFAULTS))
    p.add_argument("--tau", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--beta-max", dest="beta_max", type=float)
    p.add_argument("--method", choices=["chernoff", "bootstrap"])
    p.add_argument("--seed", type=int)
    p.add_argument("--samples-m", dest="M", type=int, help="gradient samples for the covariance")
    p.add_argument("--samples-n", dest="N", type=int, help="conditional samples per training point")
    p.add_argument("--train-s", dest="s", type=int, help="training points")
    p.add_argument("--samples-k", dest="K", type=int, help="signed-distance draws per calibration step")
    p.add_argument("--bootstrap-b", dest="B", type=int, help="bootstrap resamples")
    p.add_argument("--validation-n", dest="validation_n", type=int)
    p.add_argument("--mesh-n", dest="mesh_n", type=int)
    p.add_argument("--emax", type=float)
    p.add_argument("--out", dest="output_dir")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def config_from_args(args):
    data = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    try:
        cfg = RunConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("problem", "tau", "delta", "beta_max", "method", "seed", "mesh_n", "emax", "output_dir"):
        v = getattr(args, key)
        if v is not None:
            setattr(cfg, key, v)
    for key in SAMPLE_KEYS:
        v = getattr(args, key)
        if v is not None:
            setattr(cfg.samples, key, v)
    return cfg.resolved()


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else (logging.INFO if args.verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        out_dir = cfg.output_dir
        os.makedirs(out_dir, exist_ok=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    clock = Stopwatch()
    try:
        code = COMMANDS[args.command](cfg, out_dir, clock)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as exc:
        print(f"calibration infeasible: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (CasmError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    _write_json(
        os.path.join(out_dir, "timings.json"),
        {"command": args.command, "seconds": clock.laps, "total": clock.total()},
    )
    return code


if __name__ == "__main__":
    sys.exit(main())
