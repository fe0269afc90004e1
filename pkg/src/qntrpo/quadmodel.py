"""BFGS Hessian approximation and the local quadratic model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from qntrpo.errors import CurvatureTooSmall, DimensionMismatch
from qntrpo.linalg import SpdOperator, as_vector, quadratic_form

DEFAULT_KAPPA_MIN = 1e-3
# relative guard on s'Bs before dividing by it
SBS_GUARD = 1e-14


@dataclass(frozen=True)
class CurvaturePair:
    s: np.ndarray
    y: np.ndarray
    sty: float = field(init=False)

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if s.shape != y.shape:
            raise DimensionMismatch(f"step shape {s.shape} != gradient-difference shape {y.shape}")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sty", float(s @ y))


@dataclass(frozen=True)
class QuadraticModel:
    """``f_k + g' d + 0.5 d' B d`` around the current iterate."""

    f_value: float
    gradient: np.ndarray
    hessian_approx: SpdOperator


def bfgs_update(B: SpdOperator, pair: CurvaturePair, kappa_min: float = DEFAULT_KAPPA_MIN) -> SpdOperator:
    """Return the BFGS-updated matrix ``B - Bss'B/(s'Bs) + yy'/(y's)``.

    The result satisfies the secant condition ``B' s = y`` and stays positive
    definite because ``y's >= kappa_min > 0``. ``B`` is materialized densely.

    Raises:
        CurvatureTooSmall: if ``s'y < kappa_min`` or ``s'Bs`` underflows; the
            caller keeps the old matrix.
    """
    if pair.s.shape != (B.dim,):
        raise DimensionMismatch(f"pair of length {pair.s.shape[0]} for operator of dim {B.dim}")
    if not pair.sty >= kappa_min:
        raise CurvatureTooSmall(f"s'y = {pair.sty:.3e} < {kappa_min:.3e}")
    M = B.to_dense()
    Bs = M @ pair.s
    sBs = float(pair.s @ Bs)
    if sBs <= SBS_GUARD * float(pair.s @ pair.s):
        raise CurvatureTooSmall(f"s'Bs = {sBs:.3e} underflows")
    new = M - np.outer(Bs, Bs) / sBs + np.outer(pair.y, pair.y) / pair.sty
    # rank-two update is symmetric in exact arithmetic; remove drift
    new = 0.5 * (new + new.T)
    return SpdOperator.from_matrix(new)


def model_eval(m: QuadraticModel, dtheta) -> float:
    d = as_vector(dtheta)
    if d.shape != m.gradient.shape:
        raise DimensionMismatch(f"step of length {d.shape[0]} for model of dim {m.gradient.shape[0]}")
    return m.f_value + float(m.gradient @ d) + 0.5 * quadratic_form(m.hessian_approx, d)


def predicted_reduction(m: QuadraticModel, dtheta) -> float:
    """Model change ``f^q(theta + d) - f_k``; negative for a descent step.

    Computed directly rather than as a difference of two model values so
    that small steps do not lose precision against a large ``f_k``.
    """
    d = as_vector(dtheta)
    if d.shape != m.gradient.shape:
        raise DimensionMismatch(f"step of length {d.shape[0]} for model of dim {m.gradient.shape[0]}")
    return float(m.gradient @ d) + 0.5 * quadratic_form(m.hessian_approx, d)
