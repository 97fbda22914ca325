"""Feasible regions of the exact toy constraint and of its surrogates.

Writes ``toy_feasible_sets.csv`` (x1, x2, G, unbiased surrogate, calibrated
surrogate) on a 201 x 201 grid and prints how the three feasible sets nest.
The grid is the same one written by ``casm feasibility --problem toy``.

Run:  python demos/toy_feasible_sets.py [tau]
"""

import logging
import sys

import numpy as np

from casm import _rng
from casm.conservative import calibrate_chernoff
from casm.pipeline import fit_constraint_model
from casm.problems import toy_constraint, toy_domain, toy_source

logging.disable(logging.WARNING)

tau = float(sys.argv[1]) if len(sys.argv) > 1 else 0.95
model = fit_constraint_model(toy_source(), toy_domain(), seed=0)
cal = calibrate_chernoff(model.table, model.surrogate, tau, 0.01, 10.0, seed=_rng.stream_seed(0, _rng.CALIBRATION))

t = np.linspace(-1, 1, 201)
X1, X2 = np.meshgrid(t, t, indexing="ij")
pts = np.column_stack([X1.ravel(), X2.ravel()])
y = model.subspace.project(pts)
g = toy_constraint(pts)[0]
g0 = model.surrogate.with_bias(0.0).predict_mean(y)
gb = model.surrogate.with_bias(cal.beta).predict_mean(y)

np.savetxt("toy_feasible_sets.csv", np.column_stack([pts, g, g0, gb]), delimiter=",",
           header="x1,x2,G_exact,G_surrogate_beta0,G_surrogate_beta", comments="", fmt="%.17e")

exact, unbiased, biased = g <= 0, g0 <= 0, gb <= 0
print(f"tau={tau}  beta={cal.beta:.4f}  ({cal.iterations} bisection steps)")
print(f"feasible share of the grid: exact {exact.mean():.3f}, beta=0 {unbiased.mean():.3f}, "
      f"calibrated {biased.mean():.3f}")
print(f"calibrated-feasible points violating G <= 0: {np.sum(biased & ~exact)}")
print(f"beta=0-feasible points violating G <= 0:     {np.sum(unbiased & ~exact)}")
