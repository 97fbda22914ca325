"""Conservativeness and unfeasibility of the calibrated toy surrogate.

Fits the reduced GPR surrogate of

    G(x) = (x1 + 2 x2)^2 + x1 - x2 - 3   on [-1, 1]^2

for five seeds, calibrates the bias with both methods at several target
probabilities, and prints the seed-averaged observed conservativeness and
unfeasibility ratio on 10000 fresh points.

Run:  python demos/toy_conservativeness.py
"""

import logging

import numpy as np

from casm import _rng
from casm.conservative import ValidationSample, calibrate, empirical_conservativeness, unfeasibility_ratio
from casm.errors import CalibrationError
from casm.pipeline import fit_constraint_model
from casm.problems import toy_domain, toy_source, toy_value

logging.disable(logging.WARNING)

TAUS = (0.25, 0.5, 0.75, 0.95)
SEEDS = range(5)

rows = {}
for seed in SEEDS:
    model = fit_constraint_model(toy_source(), toy_domain(), M=200, N=10, s=100, seed=seed)
    vs = ValidationSample.draw(model.subspace, model.domain, toy_value, 10000, _rng.stream_seed(seed, _rng.VALIDATION))
    for method in ("bootstrap", "chernoff"):
        for tau in TAUS:
            try:
                cal = calibrate(method, model.table, model.surrogate, tau, 0.01, 10.0,
                                seed=_rng.stream_seed(seed, _rng.CALIBRATION))
            except CalibrationError:
                rows.setdefault((method, tau), []).append(None)
                continue
            sur = model.surrogate.with_bias(cal.beta)
            obs = empirical_conservativeness(sur, model.subspace, model.domain, None, 0, 0, sample=vs)
            ur = unfeasibility_ratio(sur, model.subspace, model.domain, None, 0, 0, sample=vs).ratio
            rows.setdefault((method, tau), []).append((cal.beta, obs, ur))

print(f"{'method':>10s} {'tau':>5s} {'beta':>8s} {'observed':>9s} {'UR':>7s}")
for (method, tau), vals in sorted(rows.items()):
    if any(v is None for v in vals):
        print(f"{method:>10s} {tau:5.2f} {'-':>8s} {'-':>9s} {'-':>7s}   (below the base level)")
        continue
    beta, obs, ur = np.mean(vals, axis=0)
    print(f"{method:>10s} {tau:5.2f} {beta:8.4f} {obs:9.3f} {ur:7.3f}")
