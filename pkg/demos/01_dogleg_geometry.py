"""
The dogleg step under a metric trust region
===========================================

A two-dimensional model ``g'd + 0.5 d'Bd`` constrained by ``d'Fd <= delta``.
As the radius grows the step slides from the boundary-scaled natural
gradient, along the dogleg segment, to the quasi-Newton point. The exact
subproblem solution is printed alongside for comparison.
"""

import numpy as np

from qntrpo import SpdOperator, dogleg_step, exact_tr_oracle

g = np.array([1.0, 1.0])
B = np.diag([1.0, 10.0])
F = np.array([[2.0, 0.3], [0.3, 1.0]])

# the two corners of the path
qn = -np.linalg.solve(B, g)
nat = np.linalg.solve(F, g)
beta = (g @ nat) / (nat @ B @ nat)
print("quasi-Newton point      ", qn, " d'Fd =", qn @ F @ qn)
print("scaled natural gradient ", -beta * nat, " d'Fd =", beta**2 * nat @ F @ nat)


def model(d):
    return g @ d + 0.5 * d @ B @ d


print(f"\n{'delta':>8} {'kind':>24} {'tau':>6} {'m(dogleg)':>10} {'m(exact)':>10}")
for delta in [0.01, 0.05, 0.1, 0.3, 0.6, 1.0, 2.0]:
    step = dogleg_step(g, SpdOperator.from_matrix(B), SpdOperator.from_matrix(F), delta)
    exact = exact_tr_oracle(g, B, F, delta)
    tau = "" if step.tau is None else f"{step.tau:.3f}"
    print(f"{delta:8.3f} {step.kind.value:>24} {tau:>6} {model(step.direction):10.5f} {model(exact):10.5f}")

# the dogleg value is never worse than the exact one by more than a small margin,
# and matches it exactly once the quasi-Newton point fits
