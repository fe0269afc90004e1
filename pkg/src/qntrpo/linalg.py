"""Vector algebra and a conjugate-gradient solver for SPD systems.

Parameter vectors are plain 1-D float64 numpy arrays. Linear maps that the
optimizer needs (the Fisher metric, the BFGS matrix) are wrapped in
:class:`SpdOperator` so they can be either dense or matrix-free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from qntrpo.errors import DimensionMismatch, NonFiniteIterate, NotSpd

MAX_DENSE_DIM = 2048


def as_vector(x, dim: Optional[int] = None) -> np.ndarray:
    """Return ``x`` as a finite 1-D float64 array, checking its length."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        v = v.reshape(-1)
    if dim is not None and v.shape[0] != dim:
        raise DimensionMismatch(f"expected vector of length {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


class SpdOperator:
    """Symmetric positive definite linear map ``v -> M v``.

    Either ``matrix`` or ``apply`` must be given. Matrix-free operators can
    still be materialized with :meth:`to_dense` for small ``dim``.
    """

    def __init__(
        self,
        dim: int,
        apply: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        matrix: Optional[np.ndarray] = None,
    ):
        if apply is None and matrix is None:
            raise ValueError("need either apply or matrix")
        self.dim = int(dim)
        self._apply = apply
        self._matrix = None
        if matrix is not None:
            m = np.asarray(matrix, dtype=np.float64)
            if m.shape != (self.dim, self.dim):
                raise DimensionMismatch(f"matrix shape {m.shape} does not match dim {self.dim}")
            self._matrix = m

    @classmethod
    def from_matrix(cls, matrix) -> "SpdOperator":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m.shape[0], matrix=m)

    @classmethod
    def identity(cls, dim: int, scale: float = 1.0) -> "SpdOperator":
        return cls(dim, apply=lambda v: scale * v, matrix=None if dim > MAX_DENSE_DIM else scale * np.eye(dim))

    @property
    def is_dense(self) -> bool:
        return self._matrix is not None

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionMismatch(f"operator of dim {self.dim} applied to shape {v.shape}")
        if self._matrix is not None:
            return self._matrix @ v
        return np.asarray(self._apply(v), dtype=np.float64)

    matvec = __call__

    def to_dense(self) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix
        if self.dim > MAX_DENSE_DIM:
            raise ValueError(f"refusing to materialize operator of dim {self.dim}")
        cols = [self(e) for e in np.eye(self.dim)]
        return np.column_stack(cols)

    def check_symmetric(self, rng=None, n_probes: int = 3, rtol: float = 1e-8) -> bool:
        """Probe ``<u, Av> == <Au, v>`` on random vectors."""
        rng = np.random.default_rng(0) if rng is None else rng
        for _ in range(n_probes):
            u = rng.standard_normal(self.dim)
            v = rng.standard_normal(self.dim)
            lhs = u @ self(v)
            rhs = self(u) @ v
            scale = max(abs(lhs), abs(rhs), np.linalg.norm(u) * np.linalg.norm(v) * 1e-300)
            if abs(lhs - rhs) > rtol * scale:
                return False
        return True

    def check_positive(self, rng=None, n_probes: int = 3) -> bool:
        rng = np.random.default_rng(1) if rng is None else rng
        return all(quadratic_form(self, rng.standard_normal(self.dim)) > 0 for _ in range(n_probes))


@dataclass(frozen=True)
class CgReport:
    solution: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool


def default_cg_max_iters(dim: int) -> int:
    return min(10 * dim, 250)


def cg_solve(op: SpdOperator, b, rel_tol: float = 1e-10, max_iters: Optional[int] = None) -> CgReport:
    """Solve ``op(x) = b`` by plain (unpreconditioned) conjugate gradients.

    Starts from ``x = 0`` and stops once ``||b - op(x)|| <= rel_tol * ||b||``.
    The returned ``residual_norm`` is recomputed from the final solution, not
    taken from the recursively updated residual.

    Raises:
        NonFiniteIterate: if an iterate turns NaN/Inf or the operator shows
            non-positive curvature along a search direction.
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    b = as_vector(b, op.dim)
    if max_iters is None:
        max_iters = default_cg_max_iters(op.dim)

    x = np.zeros_like(b)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return CgReport(x, 0, 0.0, True)
    target = rel_tol * b_norm

    r = b.copy()
    p = r.copy()
    rr = r @ r
    it = 0
    converged = False
    while it < max_iters:
        Ap = op(p)
        pAp = p @ Ap
        if not np.isfinite(pAp) or pAp <= 0.0:
            raise NonFiniteIterate(f"non-positive curvature p'Ap={pAp!r} at CG iteration {it}")
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        it += 1
        if not np.all(np.isfinite(x)):
            raise NonFiniteIterate(f"non-finite CG iterate at iteration {it}")
        rr_new = r @ r
        if np.sqrt(rr_new) <= target:
            # the recursive residual drifts; confirm with the true one
            true_res = np.linalg.norm(b - op(x))
            if true_res <= target:
                converged = True
                break
            r = b - op(x)
            rr_new = r @ r
            p = r.copy()
            rr = rr_new
            continue
        p = r + (rr_new / rr) * p
        rr = rr_new

    residual = float(np.linalg.norm(b - op(x)))
    return CgReport(x, it, residual, converged or residual <= target)


def quadratic_form(op: SpdOperator, v) -> float:
    """Return ``v' M v`` (no factor one half)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (op.dim,):
        raise DimensionMismatch(f"vector shape {v.shape} does not match operator dim {op.dim}")
    return float(v @ op(v))


def cholesky(matrix: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, raising :class:`NotSpd` on failure."""
    try:
        return np.linalg.cholesky(np.asarray(matrix, dtype=np.float64))
    except np.linalg.LinAlgError as exc:
        raise NotSpd(str(exc)) from exc
