"""
QNTRM on the Rosenbrock valley
==============================

The trust region method with an identity metric and BFGS curvature, from the
classic starting point (-1.2, 1). The radius is capped at 0.1 in squared
norm, so early iterations are boundary steps and the last ones are full
quasi-Newton steps.
"""

import collections

import numpy as np

from qntrpo import SpdOperator, TrustRegionConfig, qntrm_minimize
from qntrpo.testfunctions import rosenbrock

I = SpdOperator.identity(2)
cfg = TrustRegionConfig(delta_max=0.1, max_iters=500, grad_tol=1e-5)
theta, B, trace = qntrm_minimize(rosenbrock, lambda _t: I, [-1.2, 1.0], cfg)

print("solution", theta, "after", len(trace.records), "iterations")
print("final |grad f| = %.2e, evaluations = %d" % (trace.final_grad_norm, trace.evaluations))
print("step kinds:", dict(collections.Counter(r.kind for r in trace.records)))
print("rejected steps:", sum(not r.accepted for r in trace.records))

# BFGS ends close to the true Hessian at the minimizer
H = np.array([[802.0, -400.0], [-400.0, 200.0]])
print("\nB_final:\n", np.round(B.to_dense(), 1))
print("Hessian at (1, 1):\n", H)

print("\nfirst iterations (k, delta, nu, kind):")
for r in trace.records[:8]:
    print(f"  {r.k:3d} {r.delta:.3f} {r.nu:7.3f} {r.kind}")
