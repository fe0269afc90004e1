"""Dogleg step for ``min g'd + 0.5 d'Bd  s.t.  d'Fd <= delta``.

Note that ``delta`` bounds the *squared* metric norm of the step. The path
runs from the optimally scaled natural-gradient point ``-beta F^{-1} g`` to
the quasi-Newton point ``-B^{-1} g``.

:func:`exact_tr_oracle` solves the same subproblem exactly in whitened
coordinates (``F = L L'``) and exists for testing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg as sla
from scipy.optimize import brentq

from qntrpo.errors import CgFailure, DegenerateCurvature, NoRealRoot, NonFiniteIterate
from qntrpo.linalg import SpdOperator, as_vector, cg_solve, cholesky, quadratic_form

BOUNDARY_RTOL = 1e-6
BETA_DENOM_FLOOR = 1e-14
TAU_CLAMP = 1e-12


class StepKind(str, enum.Enum):
    QUASI_NEWTON = "QuasiNewton"
    SCALED_GRADIENT_BOUNDARY = "ScaledGradientBoundary"
    DOGLEG_INTERPOLATED = "DoglegInterpolated"


@dataclass(frozen=True)
class DoglegStep:
    direction: np.ndarray
    kind: StepKind
    metric_norm_sq: float
    tau: Optional[float] = None
    beta: Optional[float] = None
    fallback: bool = False
    cg_iterations: int = 0

    def on_boundary(self, delta: float, rtol: float = BOUNDARY_RTOL) -> bool:
        return abs(self.metric_norm_sq - delta) <= rtol * delta


def _solve(op: SpdOperator, rhs: np.ndarray, cg_tol: float, cg_max_iters: Optional[int]):
    try:
        return cg_solve(op, rhs, rel_tol=cg_tol, max_iters=cg_max_iters)
    except NonFiniteIterate as exc:
        raise CgFailure(str(exc)) from exc


def optimal_gradient_stepsize(
    grad,
    F: SpdOperator,
    B: SpdOperator,
    finv_grad: Optional[np.ndarray] = None,
    cg_tol: float = 1e-10,
) -> float:
    """Exact minimizer of the model along ``-F^{-1} g``.

    ``beta = g'F^{-1}g / ((F^{-1}g)' B (F^{-1}g))``. Pass ``finv_grad`` to
    reuse an existing solve.
    """
    g = as_vector(grad, F.dim)
    if finv_grad is None:
        finv_grad = _solve(F, g, cg_tol, None).solution
    num = float(g @ finv_grad)
    den = quadratic_form(B, finv_grad)
    if not den > BETA_DENOM_FLOOR:
        raise DegenerateCurvature(f"curvature along natural gradient is {den:.3e}")
    return num / den


def tau_root(gd, qn, F: SpdOperator, delta: float) -> float:
    """Largest ``tau`` in [0, 1] with ``||gd + tau (qn - gd)||_F^2 = delta``."""
    gd = np.asarray(gd, dtype=np.float64)
    diff = np.asarray(qn, dtype=np.float64) - gd
    F_diff = F(diff)
    a = float(diff @ F_diff)
    b = 2.0 * float(gd @ F_diff)
    c = quadratic_form(F, gd) - delta
    if not a > 0.0:
        raise NoRealRoot("dogleg segment has zero length")
    disc = b * b - 4.0 * a * c
    if disc < -TAU_CLAMP:
        raise NoRealRoot(f"discriminant {disc:.3e} < 0")
    sq = math.sqrt(max(disc, 0.0))
    # larger root, written to avoid cancellation
    if b >= 0.0:
        tau = (-2.0 * c) / (b + sq) if (b + sq) > 0.0 else 0.0
    else:
        tau = (-b + sq) / (2.0 * a)
    if -TAU_CLAMP <= tau < 0.0:
        tau = 0.0
    elif 1.0 < tau <= 1.0 + TAU_CLAMP:
        tau = 1.0
    if not 0.0 <= tau <= 1.0:
        raise NoRealRoot(f"root tau={tau:.6g} outside [0, 1]; inputs are not in the interpolation regime")
    return tau


def _boundary_gradient_step(finv_grad, F, delta, beta, fallback, iters):
    gd = -beta * finv_grad
    norm_sq = quadratic_form(F, gd)
    step = math.sqrt(delta / norm_sq) * gd
    return DoglegStep(
        step,
        StepKind.SCALED_GRADIENT_BOUNDARY,
        quadratic_form(F, step),
        beta=beta,
        fallback=fallback,
        cg_iterations=iters,
    )


def dogleg_step(
    grad,
    B: SpdOperator,
    F: SpdOperator,
    delta: float,
    cg_tol: float = 1e-10,
    cg_max_iters: Optional[int] = None,
) -> DoglegStep:
    """Dogleg step under the Fisher-metric trust region ``d'Fd <= delta``.

    1. Take the quasi-Newton step ``-B^{-1} g`` if it fits.
    2. Otherwise form ``-beta F^{-1} g``; if it reaches the boundary, scale it
       back onto the boundary.
    3. Otherwise move along the segment towards the quasi-Newton point until
       the boundary is hit.

    If the ``B`` solve fails the boundary-scaled natural gradient with unit
    stepsize is returned (``fallback=True``). A failed ``F`` solve raises
    :class:`CgFailure`.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    g = as_vector(grad, F.dim)
    if B.dim != F.dim:
        raise ValueError("B and F dimensions differ")
    if not np.any(g):
        return DoglegStep(np.zeros_like(g), StepKind.QUASI_NEWTON, 0.0)

    iters = 0
    try:
        qn_rep = _solve(B, g, cg_tol, cg_max_iters)
    except CgFailure:
        f_rep = _solve(F, g, cg_tol, cg_max_iters)
        return _boundary_gradient_step(f_rep.solution, F, delta, 1.0, True, f_rep.iterations)
    iters += qn_rep.iterations
    qn = -qn_rep.solution
    qn_norm_sq = quadratic_form(F, qn)
    if qn_norm_sq <= delta:
        return DoglegStep(qn, StepKind.QUASI_NEWTON, qn_norm_sq, cg_iterations=iters)

    f_rep = _solve(F, g, cg_tol, cg_max_iters)
    iters += f_rep.iterations
    finv_grad = f_rep.solution
    fallback = False
    try:
        beta = optimal_gradient_stepsize(g, F, B, finv_grad=finv_grad)
    except DegenerateCurvature:
        beta, fallback = 1.0, True
    gd = -beta * finv_grad
    gd_norm_sq = quadratic_form(F, gd)
    if gd_norm_sq >= delta:
        return _boundary_gradient_step(finv_grad, F, delta, beta, fallback, iters)

    tau = tau_root(gd, qn, F, delta)
    step = gd + tau * (qn - gd)
    return DoglegStep(
        step,
        StepKind.DOGLEG_INTERPOLATED,
        quadratic_form(F, step),
        tau=tau,
        beta=beta,
        fallback=fallback,
        cg_iterations=iters,
    )


def exact_tr_oracle(grad, B_dense, F_dense, delta: float, return_multiplier: bool = False):
    """Global minimizer of ``g'd + 0.5 d'Bd`` subject to ``d'Fd <= delta``.

    Whitens with the Cholesky factor of ``F``, solves the Euclidean-ball
    subproblem through the eigendecomposition of the whitened ``B`` and a
    bracketed root search on the secular equation, then maps back. The hard
    case (gradient orthogonal to the leftmost eigenvector of an indefinite
    model) is not handled.
    """
    g = np.asarray(grad, dtype=np.float64)
    B = np.asarray(B_dense, dtype=np.float64)
    F = np.asarray(F_dense, dtype=np.float64)
    L = cholesky(F)
    g_hat = sla.solve_triangular(L, g, lower=True)
    B_hat = sla.solve_triangular(L, sla.solve_triangular(L, B, lower=True).T, lower=True).T
    B_hat = 0.5 * (B_hat + B_hat.T)
    evals, Q = np.linalg.eigh(B_hat)
    c = Q.T @ g_hat
    radius = math.sqrt(delta)

    def p_of(lam):
        return -Q @ (c / (evals + lam))

    lam = 0.0
    lam_lo = max(0.0, -evals[0])
    if evals[0] > 0 and np.linalg.norm(p_of(0.0)) <= radius:
        p_hat = p_of(0.0)
    else:
        def secular(x):
            return 1.0 / radius - 1.0 / np.linalg.norm(c / (evals + x))

        lo = lam_lo + 1e-300 if lam_lo > 0 else lam_lo
        # secular decreases in lam; positive where the step is too long
        if secular(lo) <= 0.0:
            lam = lo
        else:
            hi = max(lam_lo, 0.0) + np.linalg.norm(g_hat) / radius + 1.0
            while secular(hi) > 0.0:
                hi *= 2.0
            lam = brentq(secular, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
        p_hat = p_of(lam)
    d = sla.solve_triangular(L.T, p_hat, lower=False)
    if return_multiplier:
        return d, lam
    return d
