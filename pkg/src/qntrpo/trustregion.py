"""Quasi-Newton trust region minimization (QNTRM).

Each iteration computes a dogleg step inside ``d' F d <= delta_k``, accepts
or rejects it by the ratio of actual to predicted decrease, adapts
``delta_k`` and refreshes the BFGS matrix from the trial step.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from qntrpo.dogleg import BOUNDARY_RTOL, dogleg_step
from qntrpo.errors import CgFailure, ConfigError, CurvatureTooSmall
from qntrpo.linalg import SpdOperator, as_vector
from qntrpo.quadmodel import CurvaturePair, QuadraticModel, bfgs_update, predicted_reduction

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]
Metric = Callable[[np.ndarray], SpdOperator]

PRED_FLOOR = 1e-12


@dataclass(frozen=True)
class TrustRegionConfig:
    """QNTRM constants. Defaults are the policy-optimization settings (K = 10, delta_max = 0.1)."""

    nu_lo: float = 0.1
    nu_hi: float = 0.75
    delta_max: float = 0.1
    kappa_min: float = 1e-3
    omega_lo: float = 0.3
    omega_hi: float = 2.0
    max_iters: int = 10
    grad_tol: float = 1e-8
    delta_init: Optional[float] = None
    cg_tol: float = 1e-10
    cg_max_iters: Optional[int] = None

    @property
    def delta0(self) -> float:
        return self.delta_max if self.delta_init is None else self.delta_init

    def validate(self) -> "TrustRegionConfig":
        checks = [
            ("nu_lo", 0 < self.nu_lo < self.nu_hi, "need 0 < nu_lo < nu_hi"),
            ("nu_hi", self.nu_hi < 1, "need nu_hi < 1"),
            ("delta_max", 0 < self.delta_max < 1, "need delta_max in (0, 1)"),
            ("kappa_min", 0 < self.kappa_min < 1, "need kappa_min in (0, 1)"),
            ("omega_lo", 0 < self.omega_lo < 1, "need omega_lo in (0, 1)"),
            ("omega_hi", self.omega_hi > 1, "need omega_hi > 1"),
            ("max_iters", self.max_iters >= 0, "need max_iters >= 0"),
            ("grad_tol", self.grad_tol > 0, "need grad_tol > 0"),
            ("delta_init", 0 < self.delta0 <= self.delta_max, "need delta_init in (0, delta_max]"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}", key=key)
        return self


@dataclass
class IterationRecord:
    k: int
    delta: float
    nu: float
    kind: str
    accepted: bool
    f: float
    grad_norm: float
    metric_norm_sq: float
    pred: float
    sty: float
    bfgs_updated: bool
    delta_next: float


@dataclass
class QntrmTrace:
    records: List[IterationRecord] = field(default_factory=list)
    evaluations: int = 0
    converged: bool = False
    final_f: float = math.nan
    final_grad_norm: float = math.nan

    @property
    def accepted_steps(self) -> int:
        return sum(r.accepted for r in self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(IterationRecord.__dataclass_fields__)
        writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
        return buf.getvalue()


def reduction_ratio(f_old: float, f_new: float, pred: float) -> float:
    """Actual over predicted change; ``-inf`` when the prediction is degenerate.

    A prediction is degenerate when it is not a decrease, or when it is so
    small relative to ``|f_old|`` that ``f_new - f_old`` is mostly roundoff.
    """
    if not (pred < 0.0 and -pred > PRED_FLOOR * abs(f_old)):
        return -math.inf
    nu = (f_new - f_old) / pred
    return nu if math.isfinite(nu) else -math.inf


def _evaluate(objective: Objective, theta: np.ndarray):
    try:
        f, g = objective(theta)
    except (FloatingPointError, OverflowError, ArithmeticError):
        return math.nan, None
    g = np.asarray(g, dtype=np.float64)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        return math.nan, None
    return float(f), g


def qntrm_minimize(
    objective: Objective,
    metric: Metric,
    theta0,
    cfg: Optional[TrustRegionConfig] = None,
    B_init: Optional[SpdOperator] = None,
    update_hessian: bool = True,
    check_config: bool = True,
):
    """Minimize ``objective`` with the quasi-Newton trust region method.

    Args:
        objective: ``theta -> (f, grad f)``.
        metric: ``theta -> F`` defining the trust region at ``theta``.
        theta0: starting point.
        cfg: algorithm constants; defaults to :class:`TrustRegionConfig()`.
        B_init: initial Hessian approximation, identity if omitted.
        update_hessian: set False to freeze ``B`` (used for comparisons with
            a fixed model).
        check_config: validate ``cfg`` first.

    Returns:
        ``(theta_star, B_final, trace)``. A trial point where the objective is
        non-finite counts as a rejected step.
    """
    cfg = TrustRegionConfig() if cfg is None else cfg
    if check_config:
        cfg.validate()
    theta = as_vector(theta0).copy()
    d = theta.shape[0]
    B = SpdOperator.identity(d) if B_init is None else B_init
    trace = QntrmTrace()

    f, g = _evaluate(objective, theta)
    trace.evaluations += 1
    if g is None:
        raise ValueError("objective is not finite at theta0")
    delta = cfg.delta0
    k = 0
    while np.linalg.norm(g) > cfg.grad_tol and k < cfg.max_iters:
        F = metric(theta)
        try:
            step = dogleg_step(g, B, F, delta, cg_tol=cfg.cg_tol, cg_max_iters=cfg.cg_max_iters)
        except CgFailure:
            # no usable direction at this radius; treat as a rejected step
            delta_next = cfg.omega_lo * delta
            trace.records.append(
                IterationRecord(k, delta, -math.inf, "CgFailure", False, f, float(np.linalg.norm(g)),
                                math.nan, math.nan, math.nan, False, delta_next)
            )
            delta = delta_next
            k += 1
            continue
        s = step.direction
        pred = predicted_reduction(QuadraticModel(f, g, B), s)
        f_trial, g_trial = _evaluate(objective, theta + s)
        trace.evaluations += 1
        nu = -math.inf if g_trial is None else reduction_ratio(f, f_trial, pred)

        accepted = nu >= cfg.nu_lo
        delta_next = delta
        if accepted:
            if nu >= cfg.nu_hi and step.on_boundary(delta, BOUNDARY_RTOL):
                delta_next = min(cfg.delta_max, cfg.omega_hi * delta)
        else:
            delta_next = cfg.omega_lo * delta

        sty = math.nan
        updated = False
        if g_trial is not None:
            pair = CurvaturePair(s, g_trial - g)
            sty = pair.sty
            if update_hessian and sty >= cfg.kappa_min:
                try:
                    B = bfgs_update(B, pair, cfg.kappa_min)
                    updated = True
                except CurvatureTooSmall:
                    pass

        trace.records.append(
            IterationRecord(k, delta, nu, step.kind.value, accepted, f, float(np.linalg.norm(g)),
                            step.metric_norm_sq, pred, sty, updated, delta_next)
        )
        if accepted:
            theta = theta + s
            f, g = f_trial, g_trial
        delta = delta_next
        k += 1

    trace.converged = bool(np.linalg.norm(g) <= cfg.grad_tol)
    trace.final_f = f
    trace.final_grad_norm = float(np.linalg.norm(g))
    return theta, B, trace
