"""Quasi-Newton trust region policy optimization.

A BFGS quadratic model, a dogleg step under a Fisher-metric trust region and
adaptive radius control (``qntrm_minimize``), wrapped as a policy-iteration
loop (``qntrpo_train``) with a TRPO-style baseline for comparison.
"""

from qntrpo.linalg import CgReport, SpdOperator, cg_solve, quadratic_form
from qntrpo.quadmodel import CurvaturePair, QuadraticModel, bfgs_update, model_eval, predicted_reduction
from qntrpo.dogleg import DoglegStep, StepKind, dogleg_step, exact_tr_oracle, optimal_gradient_stepsize, tau_root
from qntrpo.trustregion import QntrmTrace, TrustRegionConfig, qntrm_minimize, reduction_ratio

__version__ = "0.1.0"

__all__ = [
    "CgReport",
    "CurvaturePair",
    "DoglegStep",
    "QntrmTrace",
    "QuadraticModel",
    "SpdOperator",
    "StepKind",
    "TrustRegionConfig",
    "bfgs_update",
    "cg_solve",
    "dogleg_step",
    "exact_tr_oracle",
    "model_eval",
    "optimal_gradient_stepsize",
    "predicted_reduction",
    "qntrm_minimize",
    "quadratic_form",
    "reduction_ratio",
    "tau_root",
]
