"""Policy iteration with QNTRM inner solves, and a TRPO baseline.

Every episode samples a batch under the current policy, builds the negated
surrogate ``f`` and the Fisher metric at that policy, then either runs up to
``K`` QNTRM iterations on ``f`` (QNTRPO) or takes one natural-gradient step
with a backtracking line search (TRPO).
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from qntrpo.envs import (
    LqgEnv,
    TabularMdp,
    linear_policy_cost,
    make_env,
    policy_evaluation,
    riccati_gain,
    sample_batch,
    value_iteration,
)
from qntrpo.errors import CgFailure, ConfigError, ConfigMismatch, NonFiniteIterate, NonFiniteRatio
from qntrpo.linalg import SpdOperator, cg_solve, quadratic_form
from qntrpo.policy import (
    SurrogateObjective,
    default_damping,
    fisher_operator,
    gae_advantages,
    make_policy,
    mean_kl,
)
from qntrpo.trustregion import QntrmTrace, TrustRegionConfig, qntrm_minimize

log = logging.getLogger(__name__)

ALGORITHMS = ("QNTRPO", "TRPO")


@dataclass(frozen=True)
class LsConfig:
    shrink: float = 0.5
    max_backtracks: int = 10


@dataclass(frozen=True)
class TrainConfig:
    env: dict = field(default_factory=lambda: {"type": "gridworld"})
    policy: dict = field(default_factory=lambda: {"family": "tabular_softmax"})
    algorithm: str = "QNTRPO"
    batch_size: int = 2000
    episodes: int = 100
    gamma: float = 0.99
    lam: float = 0.97
    damping_coef: float = 1e-4
    normalize_advantages: bool = True
    value_baseline: str = "auto"
    carry_state: bool = False
    hessian_init: str = "fisher"
    kl_guard: bool = True
    seed: int = 0
    trust_region: TrustRegionConfig = field(default_factory=TrustRegionConfig)
    line_search: LsConfig = field(default_factory=LsConfig)

    def validate(self) -> "TrainConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm: must be one of {ALGORITHMS}", key="algorithm")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be positive", key="batch_size")
        if self.episodes < 0:
            raise ConfigError("episodes: must be nonnegative", key="episodes")
        for key in ("gamma", "lam"):
            if not 0 < getattr(self, key) <= 1:
                raise ConfigError(f"{key}: must lie in (0, 1]", key=key)
        if self.value_baseline not in ("auto", "exact", "fitted", "none"):
            raise ConfigError("value_baseline: must be auto, exact, fitted or none", key="value_baseline")
        if self.hessian_init not in ("fisher", "identity"):
            raise ConfigError("hessian_init: must be fisher or identity", key="hessian_init")
        if self.damping_coef < 0:
            raise ConfigError("damping_coef: must be nonnegative", key="damping_coef")
        self.trust_region.validate()
        return self


@dataclass
class EpisodeRecord:
    episode: int
    steps: int
    mean_return: float
    f_before: float
    f_after: float
    accepted_steps: int
    delta_final: float
    kl: float
    wall_ms: float
    evaluations: int
    eta: float
    max_step_violation: float = 0.0
    trace: Optional[QntrmTrace] = field(default=None, repr=False)

    CSV_FIELDS = ("episode", "mean_return", "f_before", "f_after", "accepted_steps", "delta_final", "kl", "wall_ms")


@dataclass(frozen=True)
class TrpoResult:
    theta: np.ndarray
    alpha: float
    f_new: float
    kl: float
    evaluations: int
    metric_norm_sq: float


def trpo_baseline_step(obj: SurrogateObjective, F: SpdOperator, delta: float,
                       line_search: Optional[LsConfig] = None, cg_tol: float = 1e-10) -> TrpoResult:
    """One TRPO update of ``obj.theta_old``.

    The natural gradient ``F^{-1} grad f`` is scaled so its squared metric
    norm equals ``delta``; step sizes ``shrink^j`` are tried in turn and the
    first one that lowers ``f`` while keeping the mean KL within ``delta``
    is taken. ``theta_old`` is returned unchanged if none qualifies or the
    solve fails.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    ls = LsConfig() if line_search is None else line_search
    theta_old = obj.theta_old
    f0, g = obj(theta_old)
    evals = 1
    no_step = TrpoResult(theta_old.copy(), 0.0, f0, 0.0, evals, 0.0)
    if not np.any(g):
        return no_step
    try:
        d = cg_solve(F, g, rel_tol=cg_tol).solution
    except NonFiniteIterate:
        return no_step
    dFd = quadratic_form(F, d)
    if not dFd > 0:
        return no_step
    step = math.sqrt(delta / dFd) * d
    alpha = 1.0
    for _ in range(ls.max_backtracks):
        theta = theta_old - alpha * step
        evals += 1
        try:
            f_new = obj.value(theta)
        except NonFiniteRatio:
            f_new = math.inf
        if f_new < f0:
            kl = obj.mean_kl(theta)
            if kl <= delta:
                return TrpoResult(theta, alpha, f_new, kl, evals, alpha * alpha * delta)
        alpha *= ls.shrink
    return dataclasses.replace(no_step, evaluations=evals)


class _CountingObjective:
    """Counts evaluations; optionally infinite outside the KL ball around ``theta_old``."""

    def __init__(self, obj: SurrogateObjective, kl_limit: Optional[float] = None):
        self.obj = obj
        self.kl_limit = kl_limit
        self.evaluations = 0

    def __call__(self, theta):
        self.evaluations += 1
        if self.kl_limit is not None and self.obj.mean_kl(theta) > self.kl_limit:
            return math.inf, np.full(theta.shape, math.nan)
        return self.obj(theta)


def _value_fn(cfg: TrainConfig, env, policy, theta):
    mode = cfg.value_baseline
    if mode == "none":
        return None
    if isinstance(env, TabularMdp) and mode in ("auto", "exact"):
        V = policy_evaluation(dataclasses.replace(env, gamma=cfg.gamma), policy, theta).V
        return lambda states: V[states]
    if mode == "exact":
        raise ConfigError("value_baseline: exact values need a tabular environment", key="value_baseline")
    return "fitted"


def _quadratic_features(X):
    X = np.atleast_2d(X)
    iu = np.triu_indices(X.shape[1])
    quad = np.einsum("ni,nj->nij", X, X)[:, iu[0], iu[1]]
    return np.hstack([quad, X, np.ones((X.shape[0], 1))])


def _fit_values(batch):
    """Least-squares fit of discounted returns on quadratic state features."""
    X = _quadratic_features(batch.states)
    coef, *_ = np.linalg.lstsq(X, batch.discounted_returns(), rcond=None)
    fitted = X @ coef
    eps, i = [], 0
    for e in batch.episodes:
        eps.append(dataclasses.replace(e, values=fitted[i:i + len(e)]))
        i += len(e)
    return dataclasses.replace(batch, episodes=eps)


def exact_eta(env, policy, theta) -> float:
    """Exact expected discounted return of ``theta`` (tabular or LQG)."""
    if isinstance(env, TabularMdp):
        return policy_evaluation(env, policy, theta).eta
    if isinstance(env, LqgEnv):
        W, log_std = policy.unpack(theta)
        return -linear_policy_cost(env, -W, np.exp(log_std))
    return math.nan


def optimal_eta(env) -> float:
    if isinstance(env, TabularMdp):
        return value_iteration(env, tol=1e-12)[1]
    if isinstance(env, LqgEnv):
        K, _ = riccati_gain(env)
        return -linear_policy_cost(env, K, 0.0)
    return math.nan


def qntrpo_train(cfg: TrainConfig, env=None):
    """Run ``cfg.episodes`` policy-iteration episodes.

    Returns ``(theta_final, records)``; with ``cfg.algorithm == "TRPO"`` the
    same loop runs the baseline step instead of QNTRM. Training is a pure
    function of ``cfg`` apart from the ``wall_ms`` timings.
    """
    cfg.validate()

    env = make_env(cfg.env) if env is None else env
    policy = make_policy(cfg.policy, env)
    theta = policy.initial_theta()
    rng = np.random.default_rng(cfg.seed)
    tr = cfg.trust_region
    B_carry, delta_carry = None, None
    records: List[EpisodeRecord] = []

    for i in range(cfg.episodes):
        t0 = time.perf_counter()
        vf = _value_fn(cfg, env, policy, theta)
        batch = sample_batch(env, policy, theta, cfg.batch_size, rng,
                             value_fn=None if vf == "fitted" else vf, gamma=cfg.gamma, lam=cfg.lam)
        if vf == "fitted":
            batch = _fit_values(batch)
        batch = gae_advantages(batch, normalize=cfg.normalize_advantages)
        obj = SurrogateObjective(policy, batch, theta)
        damping = default_damping(policy, theta, batch, cfg.damping_coef) if cfg.damping_coef > 0 else 0.0
        if damping == 0.0:
            damping = cfg.damping_coef
        F = fisher_operator(policy, theta, batch, damping)

        trace = None
        violation = 0.0
        if cfg.algorithm == "QNTRPO":
            counted = _CountingObjective(obj, tr.delta_max if cfg.kl_guard else None)
            tr_i = tr if delta_carry is None else dataclasses.replace(tr, delta_init=delta_carry)
            B_init = B_carry
            if B_init is None and cfg.hessian_init == "fisher":
                B_init = SpdOperator.from_matrix(F.to_dense())
            try:
                theta_new, B, trace = qntrm_minimize(counted, lambda _t, F=F: F, theta, tr_i, B_init=B_init)
            except (CgFailure, NonFiniteRatio, ValueError) as exc:
                log.warning("episode %d: inner solve failed (%s); keeping parameters", i, exc)
                theta_new, B, trace = theta.copy(), B_carry, QntrmTrace()
            evaluations = counted.evaluations
            f_before = trace.records[0].f if trace.records else obj.value(theta)
            f_after = trace.final_f if trace.records else f_before
            accepted = trace.accepted_steps
            delta_final = trace.records[-1].delta_next if trace.records else tr_i.delta0
            for r in trace.records:
                if r.accepted:
                    violation = max(violation, r.metric_norm_sq / r.delta - 1.0)
            if cfg.carry_state:
                B_carry, delta_carry = B, delta_final
        else:
            res = trpo_baseline_step(obj, F, tr.delta_max, cfg.line_search, cg_tol=tr.cg_tol)
            theta_new = res.theta
            evaluations = res.evaluations
            f_before = obj.value(theta)
            f_after = res.f_new
            accepted = int(res.alpha > 0)
            delta_final = tr.delta_max
        kl = mean_kl(policy, theta, theta_new, batch)
        if cfg.algorithm == "TRPO":
            violation = kl / tr.delta_max - 1.0 if accepted else 0.0
        wall_ms = 1000.0 * (time.perf_counter() - t0)

        theta = theta_new
        records.append(EpisodeRecord(
            episode=i,
            steps=batch.n_steps,
            mean_return=batch.mean_return(),
            f_before=f_before,
            f_after=f_after,
            accepted_steps=accepted,
            delta_final=delta_final,
            kl=kl,
            wall_ms=wall_ms,
            evaluations=evaluations,
            eta=exact_eta(env, policy, theta),
            max_step_violation=violation,
            trace=trace,
        ))
        log.debug("episode %d eta=%.4f kl=%.4g accepted=%d", i, records[-1].eta, kl, accepted)
    return theta, records


def episodes_to_threshold(records: Sequence[EpisodeRecord], threshold: float) -> Optional[int]:
    """Number of updates until the exact return first reaches ``threshold``."""
    for r in records:
        if r.eta >= threshold:
            return r.episode + 1
    return None


def threshold_for(eta_star: float, fraction: float = 0.95) -> float:
    return eta_star - (1.0 - fraction) * abs(eta_star)


@dataclass
class ComparisonReport:
    labels: tuple
    seeds: List[int]
    eta_star: float
    threshold: float
    curves: Dict[str, Dict[int, List[float]]]
    returns: Dict[str, Dict[int, List[float]]]
    to_threshold: Dict[str, Dict[int, Optional[int]]]
    wall_ms: Dict[str, Dict[int, List[float]]]
    records: Dict[str, Dict[int, List[EpisodeRecord]]] = field(repr=False, default_factory=dict)

    def median_to_threshold(self, label: str) -> float:
        """Median episodes-to-threshold; seeds that never got there count as infinity."""
        vals = [math.inf if v is None else v for v in self.to_threshold[label].values()]
        return float(np.median(vals))

    def timing(self, label: str):
        """Mean and standard deviation of per-episode wall-clock seconds."""
        t = np.concatenate([np.asarray(v) for v in self.wall_ms[label].values()]) / 1000.0
        return float(t.mean()), float(t.std(ddof=1)) if t.size > 1 else 0.0

    @property
    def time_ratio(self) -> float:
        a, b = self.labels
        return self.timing(a)[0] / self.timing(b)[0]


def _run_seed(args):
    cfg, seed = args
    _, recs = qntrpo_train(dataclasses.replace(cfg, seed=seed))
    return recs


def run_seeds(cfg: TrainConfig, seeds: Sequence[int], workers: int = 1) -> Dict[int, List[EpisodeRecord]]:
    jobs = [(cfg, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    return dict(zip(seeds, results))


COMPARED_FIELDS = ("env", "policy", "batch_size", "episodes", "gamma", "lam")


def check_comparable(cfgA: TrainConfig, cfgB: TrainConfig) -> None:
    """Raise :class:`ConfigMismatch` unless both configs run the same problem."""
    a, b = dataclasses.asdict(cfgA), dataclasses.asdict(cfgB)
    diff = [k for k in COMPARED_FIELDS if a[k] != b[k]]
    if diff:
        raise ConfigMismatch(f"configs differ in {', '.join(diff)}")


def compare_run(cfgA: TrainConfig, cfgB: TrainConfig, seeds: Sequence[int], fraction: float = 0.95,
                workers: int = 1) -> ComparisonReport:
    """Run both configs on the same seeds and collect paired curves and timings.

    Raises:
        ConfigMismatch: if the configs differ in environment, policy, batch
            size, episode count or discounting.
    """
    check_comparable(cfgA, cfgB)
    seeds = list(seeds)
    labels = (cfgA.algorithm, cfgB.algorithm)
    if labels[0] == labels[1]:
        labels = (labels[0] + "_A", labels[1] + "_B")
    eta_star = optimal_eta(make_env(cfgA.env))
    thr = threshold_for(eta_star, fraction)
    report = ComparisonReport(labels, seeds, eta_star, thr, {}, {}, {}, {}, {})
    for label, cfg in zip(labels, (cfgA, cfgB)):
        runs = run_seeds(cfg, seeds, workers)
        report.records[label] = runs
        report.curves[label] = {s: [r.eta for r in recs] for s, recs in runs.items()}
        report.returns[label] = {s: [r.mean_return for r in recs] for s, recs in runs.items()}
        report.to_threshold[label] = {s: episodes_to_threshold(recs, thr) for s, recs in runs.items()}
        report.wall_ms[label] = {s: [r.wall_ms for r in recs] for s, recs in runs.items()}
    return report
