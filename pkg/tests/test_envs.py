import numpy as np
import pytest

from qntrpo.envs import (
    LqgEnv,
    TabularMdp,
    bellman_residual,
    default_lqg,
    evaluate,
    greedy_theta,
    gridworld,
    linear_policy_cost,
    make_env,
    policy_evaluation,
    riccati_gain,
    sample_batch,
    state_visitation,
    value_iteration,
)
from qntrpo.errors import SingularSystem
from qntrpo.policy import LinearGaussian, TabularSoftmax


def random_mdp(rng, S=10, A=3, gamma=0.9, horizon=100):
    P = rng.dirichlet(np.ones(S), size=(S, A))
    return TabularMdp(P, rng.uniform(-1, 1, (S, A)), gamma=gamma, horizon=horizon)


def mc_returns(mdp, probs, n_episodes, rng):
    """Vectorized rollouts of all episodes at once; discounted returns."""
    cdf_rho = np.cumsum(mdp.rho0)
    s = np.minimum(np.searchsorted(cdf_rho, rng.random(n_episodes), side="right"), mdp.n_states - 1)
    alive = np.ones(n_episodes, dtype=bool)
    ret = np.zeros(n_episodes)
    disc = 1.0
    cdf_pi = np.cumsum(probs, axis=1)
    cdf_P = np.cumsum(mdp.P, axis=2)
    for _ in range(mdp.horizon):
        a = (rng.random(n_episodes)[:, None] > cdf_pi[s]).sum(axis=1)
        a = np.minimum(a, mdp.n_actions - 1)
        ret += alive * disc * mdp.r[s, a]
        s = np.minimum((rng.random(n_episodes)[:, None] > cdf_P[s, a]).sum(axis=1), mdp.n_states - 1)
        alive &= ~mdp.terminal[s]
        disc *= mdp.gamma
    return ret


def test_mdp_validation():
    with pytest.raises(ValueError):
        TabularMdp(np.full((1, 1, 1), 0.5), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), rho0=np.array([0.5]))
    with pytest.raises(ValueError):
        TabularMdp(np.ones((1, 1, 1)), np.full((1, 1), np.inf))


def test_gridworld_structure():
    g = gridworld()
    assert g.n_states == 26 and g.n_actions == 4
    np.testing.assert_allclose(g.P.sum(axis=2), 1.0, atol=1e-12)
    assert g.rho0[0] == 1.0 and g.terminal[25] and g.terminal.sum() == 1
    assert g.r[24].tolist() == [1.0] * 4 and g.r.sum() == 4.0
    # moving right from the start succeeds with 0.9 + 0.1/4
    assert g.P[0, 1, 1] == pytest.approx(0.925)


def test_one_state_chain_returns():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), gamma=1.0, horizon=3)
    pol = TabularSoftmax(1, 1)
    batch = sample_batch(mdp, pol, pol.initial_theta(), 10, seed=0)
    assert batch.n_steps >= 10
    assert all(e.undiscounted_return == 3.0 for e in batch.episodes)


@pytest.mark.parametrize("env", [gridworld(), default_lqg()], ids=["grid", "lqg"])
def test_sampling_deterministic(env):
    if isinstance(env, TabularMdp):
        pol = TabularSoftmax(env.n_states, env.n_actions)
    else:
        pol = LinearGaussian(env.state_dim, env.action_dim)
    theta = pol.initial_theta()
    b1 = sample_batch(env, pol, theta, 500, seed=7)
    b2 = sample_batch(env, pol, theta, 500, seed=7)
    b3 = sample_batch(env, pol, theta, 500, seed=8)
    for name in ("states", "actions", "rewards", "logp_old"):
        assert np.array_equal(getattr(b1, name), getattr(b2, name))
    assert not np.array_equal(b1.actions, b3.actions)


def test_sample_batch_rejects_bad_steps():
    pol = TabularSoftmax(26, 4)
    with pytest.raises(ValueError):
        sample_batch(gridworld(), pol, pol.initial_theta(), 0)


def test_gridworld_visitation_matches_model():
    g = gridworld()
    pol = TabularSoftmax(g.n_states, g.n_actions)
    theta = pol.initial_theta()
    # 1e5 steps give an expected L1 near 0.023 because steps within an
    # episode are strongly correlated; 4e5 steps halve the noise
    batch = sample_batch(g, pol, theta, 400_000, seed=3)
    emp = np.bincount(batch.states, minlength=g.n_states) / batch.n_steps
    assert np.abs(emp - state_visitation(g, pol, theta)).sum() <= 0.02


def test_value_iteration_geometric():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), gamma=0.5)
    V, eta = value_iteration(mdp, tol=1e-14)
    assert V[0] == pytest.approx(2.0, abs=1e-12) and eta == pytest.approx(2.0, abs=1e-12)


def test_value_iteration_two_state_chain():
    # action 0 stays, action 1 moves to state 1; staying in 1 pays 2, in 0 pays 0.5, moving pays 1
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[0, 1, 1] = P[1, 0, 1] = P[1, 1, 1] = 1.0
    r = np.array([[0.5, 1.0], [2.0, 1.0]])
    gamma = 0.9
    V, eta = value_iteration(TabularMdp(P, r, gamma=gamma, rho0=[1.0, 0.0]), tol=1e-12)
    V1 = 2.0 / (1 - gamma)
    V0 = max(1.0 + gamma * V1, 0.5 / (1 - gamma))
    np.testing.assert_allclose(V, [V0, V1], atol=1e-10)
    assert eta == pytest.approx(V0, abs=1e-10)


def test_value_iteration_random_residual(rng):
    mdp = random_mdp(rng)
    V, _ = value_iteration(mdp, tol=1e-12)
    assert bellman_residual(mdp, V) <= 1e-10


def test_value_iteration_finite_horizon():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), gamma=1.0, horizon=7)
    assert value_iteration(mdp)[1] == 7.0


def test_policy_evaluation_symmetric():
    P = np.full((2, 2, 2), 0.5)
    mdp = TabularMdp(P, np.ones((2, 2)), gamma=0.9)
    pv = policy_evaluation(mdp, TabularSoftmax(2, 2), np.zeros(4))
    assert pv.V[0] == pytest.approx(pv.V[1], abs=1e-12)
    assert pv.V[0] == pytest.approx(10.0, abs=1e-10)


def test_greedy_policy_is_optimal(rng):
    for mdp in (random_mdp(rng), gridworld()):
        V, eta_star = value_iteration(mdp, tol=1e-13)
        pol = TabularSoftmax(mdp.n_states, mdp.n_actions)
        pv = policy_evaluation(mdp, pol, greedy_theta(mdp, V, scale=100.0))
        assert pv.eta == pytest.approx(eta_star, abs=1e-9)


def test_exact_advantages_average_to_zero(rng):
    mdp = random_mdp(rng)
    pol = TabularSoftmax(mdp.n_states, mdp.n_actions)
    theta = rng.standard_normal(pol.dim)
    pv = policy_evaluation(mdp, pol, theta)
    assert np.abs(np.sum(pv.probs * pv.advantages, axis=1)).max() <= 1e-12


def test_policy_evaluation_singular():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), gamma=1.0)
    with pytest.raises(SingularSystem):
        policy_evaluation(mdp, TabularSoftmax(1, 1), np.zeros(1))


def test_policy_evaluation_monte_carlo():
    rng = np.random.default_rng(11)
    mdp = random_mdp(rng, S=8, A=3, gamma=0.9, horizon=250)
    pol = TabularSoftmax(mdp.n_states, mdp.n_actions)
    theta = rng.standard_normal(pol.dim)
    eta = policy_evaluation(mdp, pol, theta).eta
    ret = mc_returns(mdp, pol.probs(theta), 100_000, rng)
    se = ret.std(ddof=1) / np.sqrt(ret.size)
    assert abs(ret.mean() - eta) <= 3 * se


def test_gridworld_monte_carlo_with_terminal():
    rng = np.random.default_rng(5)
    g = gridworld(horizon=400)
    pol = TabularSoftmax(g.n_states, g.n_actions)
    theta = rng.standard_normal(pol.dim)
    eta = policy_evaluation(g, pol, theta).eta
    ret = mc_returns(g, pol.probs(theta), 20_000, rng)
    assert abs(ret.mean() - eta) <= 3 * ret.std(ddof=1) / np.sqrt(ret.size)


def test_evaluate_report():
    g = gridworld()
    pol = TabularSoftmax(g.n_states, g.n_actions)
    V, eta_star = value_iteration(g)
    rep = evaluate(g, pol, greedy_theta(g, V), n_episodes=400, seed=0)
    assert rep.episodes == 400
    # horizon truncation makes sampled returns no larger than the infinite-horizon value
    assert abs(rep.mean_discounted_return - eta_star) <= 4 * rep.std_error + 1e-3


# --- LQG ---------------------------------------------------------------------

def test_lqg_validation():
    with pytest.raises(ValueError):
        LqgEnv(A=np.eye(2), B=[[1.0], [0.0]], Q=np.eye(2), R=[[1.0]], W=np.eye(2), x0_cov=np.eye(2))
    with pytest.raises(ValueError):
        LqgEnv(A=[[1.0]], B=[[1.0]], Q=[[1.0]], R=[[0.0]], W=[[1.0]], x0_cov=[[1.0]])


def test_riccati_value_matches_long_horizon_cost():
    env = default_lqg(gamma=0.95)
    K, P = riccati_gain(env)
    gamma = env.gamma
    v_inf = np.trace(P @ env.x0_cov) + gamma / (1 - gamma) * np.trace(P @ env.W)
    assert linear_policy_cost(env, K, horizon=3000) == pytest.approx(v_inf, rel=1e-9)
    # any perturbed gain is worse
    for dK in (np.array([[0.2, 0.0]]), np.array([[0.0, -0.3]])):
        assert linear_policy_cost(env, K + dK, horizon=3000) > v_inf


def test_lqg_sampled_cost_matches_exact():
    env = default_lqg(horizon=50)
    K, _ = riccati_gain(env)
    pol = LinearGaussian(env.state_dim, env.action_dim)
    std = 0.2
    theta = pol.pack(-K, [np.log(std)])
    batch = sample_batch(env, pol, theta, 50 * 4000, seed=1)
    disc = env.gamma ** np.arange(env.horizon)
    costs = np.array([-np.sum(e.rewards * disc) for e in batch.episodes])
    exact = linear_policy_cost(env, K, action_std=std)
    assert abs(costs.mean() - exact) <= 3 * costs.std(ddof=1) / np.sqrt(costs.size)


def test_make_env():
    assert make_env({"type": "gridworld", "size": 3}).n_states == 10
    assert isinstance(make_env({"type": "lqg"}), LqgEnv)
    mdp = make_env({"type": "tabular", "P": [[[1.0]]], "r": [[1.0]], "gamma": 0.5})
    assert value_iteration(mdp)[1] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        make_env({"type": "mujoco"})
