import dataclasses
import math

import numpy as np
import pytest

from qntrpo.driver import (
    EpisodeRecord,
    LsConfig,
    TrainConfig,
    compare_run,
    episodes_to_threshold,
    exact_eta,
    optimal_eta,
    qntrpo_train,
    threshold_for,
    trpo_baseline_step,
)
from qntrpo.envs import gridworld, sample_batch
from qntrpo.errors import ConfigError, ConfigMismatch
from qntrpo.linalg import SpdOperator
from qntrpo.policy import SurrogateObjective, TabularSoftmax, fisher_operator, gae_advantages, mean_kl
from qntrpo.trustregion import TrustRegionConfig

SMALL = dict(batch_size=500, episodes=6)


class QuadObjective:
    """``f = c'theta + 0.5 theta'theta``; KL to ``theta_old`` is ``0.5 |d|^2`` so ``F = I``."""

    def __init__(self, c, theta_old):
        self.c = np.asarray(c, dtype=float)
        self.theta_old = np.asarray(theta_old, dtype=float)

    def value(self, theta):
        return float(self.c @ theta + 0.5 * theta @ theta)

    def __call__(self, theta):
        return self.value(theta), self.c + theta

    def mean_kl(self, theta):
        d = theta - self.theta_old
        return 0.5 * float(d @ d)


def comparable(rec: EpisodeRecord):
    d = dataclasses.asdict(rec)
    d.pop("wall_ms")
    d.pop("trace")
    return d, (rec.trace.to_csv() if rec.trace is not None else None)


def test_config_validation():
    with pytest.raises(ConfigError) as info:
        TrainConfig(algorithm="PPO").validate()
    assert info.value.key == "algorithm"
    for kw in (dict(batch_size=0), dict(gamma=0.0), dict(lam=1.5), dict(value_baseline="x"), dict(hessian_init="x")):
        with pytest.raises(ConfigError) as info:
            TrainConfig(**kw).validate()
        assert info.value.key == next(iter(kw))
    with pytest.raises(ConfigError):
        TrainConfig(trust_region=TrustRegionConfig(nu_lo=0.9)).validate()


def test_trpo_identity_metric_boundary_step():
    theta_old = np.array([0.5, -1.0, 2.0])
    obj = QuadObjective([1.0, 2.0, -1.0], theta_old)
    delta = 0.01
    res = trpo_baseline_step(obj, SpdOperator.identity(3), delta)
    g = obj(theta_old)[1]
    expected = theta_old - math.sqrt(delta / (g @ g)) * g
    assert res.alpha == 1.0
    np.testing.assert_allclose(res.theta, expected, rtol=1e-12)
    assert res.metric_norm_sq == pytest.approx(delta)
    assert res.evaluations == 2


def test_trpo_backtracks_on_kl():
    theta_old = np.zeros(2)
    obj = QuadObjective([1.0, 0.0], theta_old)
    # the metric underestimates the KL by 16x: KL = 8 alpha^2 delta, first fit at alpha = 1/4
    res = trpo_baseline_step(obj, SpdOperator.identity(2, 1.0 / 16.0), 0.01, LsConfig(0.5, 10))
    assert res.alpha == 0.25
    assert res.kl <= 0.01
    assert res.evaluations == 4


def test_trpo_no_improvement_returns_old():
    theta_old = np.array([1.0, 1.0])

    class Flat(QuadObjective):
        def value(self, theta):
            return 0.0

        def __call__(self, theta):
            return 0.0, np.ones(2)

    obj = Flat([0.0, 0.0], theta_old)
    res = trpo_baseline_step(obj, SpdOperator.identity(2), 0.1, LsConfig(0.5, 7))
    assert res.alpha == 0.0 and np.array_equal(res.theta, theta_old)
    assert res.evaluations == 8


def test_trpo_gridworld_kl_bound():
    env = gridworld()
    pol = TabularSoftmax(env.n_states, env.n_actions)
    rng = np.random.default_rng(0)
    theta = rng.normal(0, 0.5, pol.dim)
    batch = gae_advantages(sample_batch(env, pol, theta, 2000, seed=1))
    obj = SurrogateObjective(pol, batch, theta)
    F = fisher_operator(pol, theta, batch, 1e-4)
    delta = 0.1
    res = trpo_baseline_step(obj, F, delta)
    assert res.alpha > 0
    assert mean_kl(pol, theta, res.theta, batch) <= delta * (1 + 1e-6)
    assert obj.value(res.theta) < obj.value(theta)


def test_degenerate_one_state_mdp():
    cfg = TrainConfig(env={"type": "tabular", "P": [[[1.0]]], "r": [[1.0]], "horizon": 5},
                      batch_size=20, episodes=4)
    theta, recs = qntrpo_train(cfg)
    etas = {r.eta for r in recs}
    assert len(etas) == 1
    assert all(r.kl == 0.0 for r in recs)


@pytest.mark.parametrize("algorithm", ["QNTRPO", "TRPO"])
def test_deterministic(algorithm):
    cfg = TrainConfig(algorithm=algorithm, seed=3, **SMALL)
    th1, r1 = qntrpo_train(cfg)
    th2, r2 = qntrpo_train(cfg)
    assert np.array_equal(th1, th2)
    assert [comparable(r) for r in r1] == [comparable(r) for r in r2]


def test_same_first_batch_across_algorithms():
    a = qntrpo_train(TrainConfig(algorithm="QNTRPO", seed=4, **SMALL))[1]
    b = qntrpo_train(TrainConfig(algorithm="TRPO", seed=4, **SMALL))[1]
    assert (a[0].steps, a[0].mean_return, a[0].f_before) == (b[0].steps, b[0].mean_return, b[0].f_before)
    assert [r.eta for r in a] != [r.eta for r in b]


@pytest.mark.parametrize("algorithm", ["QNTRPO", "TRPO"])
def test_episode_invariants(algorithm):
    cfg = TrainConfig(algorithm=algorithm, seed=1, **SMALL)
    K = cfg.trust_region.max_iters
    _, recs = qntrpo_train(cfg)
    assert len(recs) == cfg.episodes
    for r in recs:
        assert r.evaluations <= 2 * K + 1
        assert r.f_after <= r.f_before
        assert math.isfinite(r.kl) and r.kl >= 0
        assert r.max_step_violation <= 1e-6
        if algorithm == "QNTRPO":
            assert len(r.trace.records) <= K
            for it in r.trace.records:
                if it.accepted:
                    assert it.metric_norm_sq <= it.delta * (1 + 1e-6)
        else:
            assert r.kl <= cfg.trust_region.delta_max * (1 + 1e-6)


def test_state_reset_and_carry():
    _, recs = qntrpo_train(TrainConfig(seed=2, **SMALL))
    assert all(r.trace.records[0].delta == 0.1 for r in recs)
    _, recs = qntrpo_train(TrainConfig(seed=2, carry_state=True, **SMALL))
    for prev, cur in zip(recs, recs[1:]):
        assert cur.trace.records[0].delta == prev.delta_final


def test_identity_init_and_no_guard_run():
    for kw in (dict(hessian_init="identity"), dict(kl_guard=False), dict(value_baseline="none")):
        _, recs = qntrpo_train(TrainConfig(seed=0, **SMALL, **kw))
        assert len(recs) == SMALL["episodes"]


def test_lqg_training_improves():
    cfg = TrainConfig(env={"type": "lqg"}, policy={"family": "linear_gaussian"}, batch_size=1000, episodes=10)
    _, recs = qntrpo_train(cfg)
    assert recs[-1].eta > recs[0].eta
    assert all(r.evaluations <= 21 for r in recs)


def test_threshold_helpers():
    assert threshold_for(2.0, 0.95) == pytest.approx(1.9)
    assert threshold_for(-10.0, 0.95) == pytest.approx(-10.5)
    recs = [EpisodeRecord(i, 1, 0, 0, 0, 0, 0, 0, 0, 0, eta) for i, eta in enumerate([0.1, 0.5, 0.9])]
    assert episodes_to_threshold(recs, 0.5) == 2
    assert episodes_to_threshold(recs, 1.0) is None


def test_compare_self_and_mismatch():
    cfg = TrainConfig(**SMALL)
    rep = compare_run(cfg, cfg, seeds=[0, 1])
    a, b = rep.labels
    assert rep.curves[a] == rep.curves[b]
    assert rep.to_threshold[a] == rep.to_threshold[b]
    assert rep.median_to_threshold(a) == rep.median_to_threshold(b)
    assert rep.timing(a)[0] > 0
    assert rep.eta_star == pytest.approx(optimal_eta(gridworld()))
    with pytest.raises(ConfigMismatch):
        compare_run(cfg, dataclasses.replace(cfg, batch_size=600), seeds=[0])


def test_default_gridworld_run_reaches_near_optimal():
    cfg = TrainConfig(seed=0)
    env = gridworld()
    theta, recs = qntrpo_train(cfg)
    eta_star = optimal_eta(env)
    pol = TabularSoftmax(env.n_states, env.n_actions)
    assert exact_eta(env, pol, theta) >= 0.95 * eta_star
    ret = np.array([r.mean_return for r in recs])
    ma = np.convolve(ret, np.ones(10) / 10, mode="valid")
    # trend check: a moving-average drop larger than 1% of the return scale would be a regression
    assert np.diff(ma).min() >= -0.01
    assert ma[-1] > ma[0]
