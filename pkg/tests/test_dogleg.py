import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qntrpo.dogleg import (
    StepKind,
    dogleg_step,
    exact_tr_oracle,
    optimal_gradient_stepsize,
    tau_root,
)
from qntrpo.errors import DegenerateCurvature, NoRealRoot, NotSpd
from qntrpo.linalg import SpdOperator

from oracles import golden_section, model_change, random_spd

I2 = SpdOperator.identity(2)


def dense(M):
    return SpdOperator.from_matrix(M)


def test_stepsize_identity_cases(rng):
    g = rng.standard_normal(3)
    assert optimal_gradient_stepsize(g, SpdOperator.identity(3), SpdOperator.identity(3)) == pytest.approx(1.0, rel=1e-12)
    assert optimal_gradient_stepsize(g, SpdOperator.identity(3), SpdOperator.identity(3, 2.0)) == pytest.approx(0.5, rel=1e-12)


def test_stepsize_matches_line_minimization(rng):
    F, B = random_spd(rng, 5), random_spd(rng, 5)
    g = rng.standard_normal(5)
    direction = -np.linalg.solve(F, g)
    beta_ref = golden_section(lambda t: model_change(g, B, t * direction), 0.0, 50.0)
    beta = optimal_gradient_stepsize(g, dense(F), dense(B))
    assert abs(beta - beta_ref) <= 1e-6 * beta_ref


def test_stepsize_degenerate():
    B = SpdOperator(2, apply=lambda v: 1e-20 * v)
    with pytest.raises(DegenerateCurvature):
        optimal_gradient_stepsize(np.array([1e-3, 0.0]), I2, B)


def test_dogleg_quasi_newton_inside():
    step = dogleg_step(np.array([1.0, 0.0]), I2, I2, 4.0)
    assert step.kind is StepKind.QUASI_NEWTON
    np.testing.assert_allclose(step.direction, [-1.0, 0.0])
    assert step.metric_norm_sq == pytest.approx(1.0)


def test_dogleg_boundary_gradient():
    step = dogleg_step(np.array([1.0, 0.0]), I2, I2, 0.25)
    assert step.kind is StepKind.SCALED_GRADIENT_BOUNDARY
    np.testing.assert_allclose(step.direction, [-0.5, 0.0])
    assert step.metric_norm_sq == pytest.approx(0.25, rel=1e-12)


def test_dogleg_interpolated_near_exact():
    g = np.array([1.0, 1.0])
    B = np.diag([1.0, 10.0])
    F = np.eye(2)
    # ||gd||^2 = 8/121, ||qn||^2 = 1.01
    delta = 0.5
    step = dogleg_step(g, dense(B), dense(F), delta)
    assert step.kind is StepKind.DOGLEG_INTERPOLATED
    assert 0 < step.tau < 1
    assert abs(step.metric_norm_sq - delta) <= 1e-6 * delta
    exact = exact_tr_oracle(g, B, F, delta)
    red_dl = -model_change(g, B, step.direction)
    red_ex = -model_change(g, B, exact)
    assert red_dl >= 0.9 * red_ex


def test_dogleg_zero_gradient():
    step = dogleg_step(np.zeros(2), I2, I2, 0.1)
    assert np.all(step.direction == 0)


def test_dogleg_falls_back_when_B_solve_fails():
    bad_B = SpdOperator(2, apply=lambda v: -v)
    step = dogleg_step(np.array([1.0, 0.0]), bad_B, I2, 0.25)
    assert step.fallback and step.kind is StepKind.SCALED_GRADIENT_BOUNDARY
    assert step.beta == 1.0
    np.testing.assert_allclose(step.direction, [-0.5, 0.0])


def test_tau_root_pure_scaling():
    F = SpdOperator.identity(2)
    assert tau_root(np.zeros(2), np.array([2.0, 0.0]), F, 1.0) == pytest.approx(0.5, rel=1e-14)


def test_tau_root_degenerate_segment():
    g = np.array([0.1, 0.0])
    with pytest.raises(NoRealRoot):
        tau_root(g, g, I2, 1.0)


def test_tau_root_back_substitution(rng):
    d = 6
    F = random_spd(rng, d)
    gd = 0.1 * rng.standard_normal(d)
    qn = 3.0 * rng.standard_normal(d)
    lo, hi = gd @ F @ gd, qn @ F @ qn
    delta = 0.5 * (lo + hi)
    tau = tau_root(gd, qn, dense(F), delta)
    p = gd + tau * (qn - gd)
    assert abs(p @ F @ p - delta) <= 1e-10 * delta
    assert 0 <= tau <= 1


def test_oracle_trivial_cases():
    np.testing.assert_allclose(exact_tr_oracle([1.0, 0.0], np.eye(2), np.eye(2), 4.0), [-1.0, 0.0], atol=1e-14)
    np.testing.assert_allclose(exact_tr_oracle([1.0, 0.0], np.eye(2), np.eye(2), 0.25), [-0.5, 0.0], atol=1e-12)


def test_oracle_kkt(rng):
    d = 4
    B, F = random_spd(rng, d), random_spd(rng, d)
    g = rng.standard_normal(d)
    qn = np.linalg.solve(B, g)
    delta = 0.3 * qn @ F @ qn
    x, lam = exact_tr_oracle(g, B, F, delta, return_multiplier=True)
    assert lam >= 0
    assert np.linalg.norm((B + lam * F) @ x + g) <= 1e-8
    assert abs(lam * (x @ F @ x - delta)) <= 1e-8


def test_oracle_rejects_non_spd_metric():
    with pytest.raises(NotSpd):
        exact_tr_oracle([1.0, 0.0], np.eye(2), np.diag([1.0, -1.0]), 1.0)


def _instance(rng, d):
    B, F = random_spd(rng, d), random_spd(rng, d)
    g = rng.standard_normal(d)
    qn = np.linalg.solve(B, g)
    delta = (qn @ F @ qn) * 10 ** rng.uniform(-3, 0.5)
    return g, B, F, delta


@settings(max_examples=60, deadline=None)
@given(d=st.integers(2, 8), seed=st.integers(0, 2**31 - 1))
def test_dogleg_properties(d, seed):
    rng = np.random.default_rng(seed)
    g, B, F, delta = _instance(rng, d)
    step = dogleg_step(g, dense(B), dense(F), delta)
    s = step.direction
    assert s @ F @ s <= delta * (1 + 1e-8)
    red = model_change(g, B, s)
    assert red < 0
    # Cauchy point in the metric: best model point along -F^{-1} g inside the region
    nat = np.linalg.solve(F, g)
    t_cap = np.sqrt(delta / (nat @ F @ nat))
    t_opt = optimal_gradient_stepsize(g, dense(F), dense(B))
    cauchy = -min(t_opt, t_cap) * nat
    assert red <= model_change(g, B, cauchy) + 1e-10
    exact = exact_tr_oracle(g, B, F, delta)
    assert exact @ F @ exact <= delta * (1 + 1e-8)
    assert model_change(g, B, exact) <= red + 1e-10
    assert red <= 0.5 * model_change(g, B, exact)
    if step.kind is StepKind.QUASI_NEWTON:
        assert np.linalg.norm(s - exact) <= 1e-8 * max(1.0, np.linalg.norm(exact))
    if step.kind is not StepKind.QUASI_NEWTON:
        assert abs(step.metric_norm_sq - delta) <= 1e-6 * delta
    if step.kind is StepKind.DOGLEG_INTERPOLATED:
        assert 0 <= step.tau <= 1


def test_dogleg_path_norm_monotone():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 200:
        d = int(rng.integers(2, 9))
        g, B, F, delta = _instance(rng, d)
        qn = -np.linalg.solve(B, g)
        nat = np.linalg.solve(F, g)
        beta = (g @ nat) / (nat @ B @ nat)
        gd = -beta * nat
        if not gd @ F @ gd < delta < qn @ F @ qn:
            continue
        taus = np.linspace(0, 1, 101)
        norms = [(gd + t * (qn - gd)) @ F @ (gd + t * (qn - gd)) for t in taus]
        assert np.all(np.diff(norms) >= -1e-12 * max(norms))
        checked += 1
