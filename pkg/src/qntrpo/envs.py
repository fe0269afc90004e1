"""Small environments whose optimal performance can be computed exactly.

* :class:`TabularMdp` with :func:`gridworld` as the default instance;
  exact oracles via :func:`value_iteration` and :func:`policy_evaluation`.
* :class:`LqgEnv`, a discounted linear-quadratic-Gaussian regulator with a
  Riccati oracle and an exact cost formula for linear Gaussian policies.

Episodes are truncated at ``horizon``; truncation and terminal states both
bootstrap with ``V = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg as sla

from qntrpo.errors import SingularSystem
from qntrpo.policy import Episode, RolloutBatch


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP. ``P[s, a, s']`` transition probabilities, ``r[s, a]`` rewards.

    Entering a state flagged in ``terminal`` ends the episode. Terminal states
    should be absorbing with zero reward so that the infinite-horizon oracles
    agree with the sampler.
    """

    P: np.ndarray
    r: np.ndarray
    gamma: float = 0.99
    rho0: Optional[np.ndarray] = None
    horizon: int = 100
    terminal: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        S, A = r.shape
        if P.shape != (S, A, S):
            raise ValueError(f"P has shape {P.shape}, expected {(S, A, S)}")
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, rtol=0, atol=1e-12):
            raise ValueError("each P[s, a, :] must be a probability vector")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        rho0 = np.full(S, 1.0 / S) if self.rho0 is None else np.asarray(self.rho0, dtype=np.float64)
        if rho0.shape != (S,) or abs(rho0.sum() - 1.0) > 1e-12 or np.any(rho0 < 0):
            raise ValueError("rho0 must be a probability vector over states")
        terminal = np.zeros(S, dtype=bool) if self.terminal is None else np.asarray(self.terminal, dtype=bool)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "rho0", rho0)
        object.__setattr__(self, "terminal", terminal)

    @property
    def n_states(self) -> int:
        return self.r.shape[0]

    @property
    def n_actions(self) -> int:
        return self.r.shape[1]


def gridworld(
    size: int = 5,
    slip: float = 0.1,
    goal_reward: float = 1.0,
    step_reward: float = 0.0,
    gamma: float = 0.99,
    horizon: int = 100,
    start=(0, 0),
    goal=None,
) -> TabularMdp:
    """``size x size`` grid plus one absorbing terminal state (index ``size**2``).

    Actions are up, right, down, left. With probability ``slip`` the move
    direction is drawn uniformly from all four. Bumping a wall keeps the
    agent in place. Acting in the goal cell pays ``goal_reward`` and ends the
    episode; every other action pays ``step_reward``.
    """
    goal = (size - 1, size - 1) if goal is None else tuple(goal)
    n = size * size
    S, A = n + 1, 4
    sink = n
    moves = [(-1, 0), (0, 1), (1, 0), (0, -1)]

    def idx(row, col):
        return row * size + col

    P = np.zeros((S, A, S))
    r = np.full((S, A), float(step_reward))
    for row in range(size):
        for col in range(size):
            s = idx(row, col)
            if (row, col) == goal:
                P[s, :, sink] = 1.0
                r[s, :] = goal_reward
                continue
            for a in range(A):
                for m, (dr, dc) in enumerate(moves):
                    prob = (1.0 - slip) * (m == a) + slip / A
                    nr, nc = row + dr, col + dc
                    if not (0 <= nr < size and 0 <= nc < size):
                        nr, nc = row, col
                    P[s, a, idx(nr, nc)] += prob
    P[sink, :, sink] = 1.0
    r[sink, :] = 0.0
    rho0 = np.zeros(S)
    rho0[idx(*start)] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[sink] = True
    return TabularMdp(P, r, gamma=gamma, rho0=rho0, horizon=horizon, terminal=terminal)


@dataclass(frozen=True)
class LqgEnv:
    """``x' = A x + B u + w``, ``w ~ N(0, W)``; reward ``-(x'Qx + u'Ru)``."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    W: np.ndarray
    x0_cov: np.ndarray
    horizon: int = 50
    gamma: float = 0.99

    def __post_init__(self):
        for name in ("A", "B", "Q", "R", "W", "x0_cov"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.Q.shape != (n, n) or self.R.shape != (m, m):
            raise ValueError("inconsistent LQG matrix shapes")
        if np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T)).min() < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (self.R + self.R.T)).min() <= 0:
            raise ValueError("R must be positive definite")
        ctrb = np.hstack([np.linalg.matrix_power(self.A, k) @ self.B for k in range(n)])
        if np.linalg.matrix_rank(ctrb) < n:
            raise ValueError("(A, B) is not controllable")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]


def default_lqg(horizon: int = 50, gamma: float = 0.99) -> LqgEnv:
    """Double integrator with small process noise."""
    dt = 0.1
    return LqgEnv(
        A=[[1.0, dt], [0.0, 1.0]],
        B=[[0.5 * dt * dt], [dt]],
        Q=np.eye(2),
        R=[[0.1]],
        W=0.01 * np.eye(2),
        x0_cov=np.eye(2),
        horizon=horizon,
        gamma=gamma,
    )


def riccati_gain(env: LqgEnv):
    """Optimal stationary gain ``K`` (``u = -K x``) and cost matrix ``P``."""
    sg = np.sqrt(env.gamma)
    A, B = sg * env.A, sg * env.B
    P = sla.solve_discrete_are(A, B, env.Q, env.R)
    K = np.linalg.solve(env.R + B.T @ P @ B, B.T @ P @ A)
    return K, P


def linear_policy_cost(env: LqgEnv, K, action_std=0.0, horizon: Optional[int] = None) -> float:
    """Exact expected discounted cost over ``horizon`` steps of ``u = -K x + std * eps``."""
    horizon = env.horizon if horizon is None else horizon
    K = np.atleast_2d(K)
    m = env.action_dim
    Su = np.diag(np.broadcast_to(np.asarray(action_std, dtype=np.float64) ** 2, (m,)))
    Acl = env.A - env.B @ K
    Sigma = env.x0_cov.copy()
    cost = 0.0
    disc = 1.0
    for _ in range(horizon):
        cost += disc * (np.trace((env.Q + K.T @ env.R @ K) @ Sigma) + np.trace(env.R @ Su))
        Sigma = Acl @ Sigma @ Acl.T + env.B @ Su @ env.B.T + env.W
        disc *= env.gamma
    return float(cost)


# sampling -------------------------------------------------------------------

def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _sample_tabular_episode(mdp: TabularMdp, cdf_pi, cdf_P, rng):
    n_s, n_a = mdp.n_states, mdp.n_actions
    states, actions = [], []
    s = min(int(np.searchsorted(np.cumsum(mdp.rho0), rng.random(), side="right")), n_s - 1)
    for _ in range(mdp.horizon):
        u_a, u_s = rng.random(2)
        row = cdf_pi[s]
        a = min(int(np.searchsorted(row, u_a * row[-1], side="right")), n_a - 1)
        states.append(s)
        actions.append(a)
        cdf = cdf_P[s, a]
        s = min(int(np.searchsorted(cdf, u_s * cdf[-1], side="right")), n_s - 1)
        if mdp.terminal[s]:
            break
    return np.array(states, dtype=np.int64), np.array(actions, dtype=np.int64)


def sample_batch(env, policy, theta, min_steps: int, seed=None, value_fn: Optional[Callable] = None,
                 gamma: Optional[float] = None, lam: float = 0.97) -> RolloutBatch:
    """Collect whole episodes until at least ``min_steps`` transitions.

    ``seed`` may be an int or a ``numpy.random.Generator`` (advanced in
    place). ``value_fn`` maps an array of states to baseline values; zeros if
    omitted.
    """
    if min_steps < 1:
        raise ValueError("min_steps must be >= 1")
    rng = _rng(seed)
    gamma = env.gamma if gamma is None else gamma
    theta = np.asarray(theta, dtype=np.float64)
    episodes, total = [], 0
    if isinstance(env, TabularMdp):
        cdf_pi = np.cumsum(policy.probs(theta), axis=1)
        cdf_P = np.cumsum(env.P, axis=2)
        while total < min_steps:
            states, actions = _sample_tabular_episode(env, cdf_pi, cdf_P, rng)
            rewards = env.r[states, actions]
            values = np.zeros(len(states)) if value_fn is None else np.asarray(value_fn(states), dtype=np.float64)
            logp = policy.log_prob(theta, states, actions)
            episodes.append(Episode(states, actions, rewards, values, logp))
            total += len(states)
    elif isinstance(env, LqgEnv):
        W, log_std = policy.unpack(theta)
        std = np.exp(log_std)
        chol0 = np.linalg.cholesky(env.x0_cov)
        cholw = np.linalg.cholesky(env.W)
        n, m = env.state_dim, env.action_dim
        while total < min_steps:
            H = env.horizon
            xs = np.zeros((H, n))
            us = np.zeros((H, m))
            rewards = np.zeros(H)
            x = chol0 @ rng.standard_normal(n)
            for t in range(H):
                u = W @ x + std * rng.standard_normal(m)
                xs[t], us[t] = x, u
                rewards[t] = -(x @ env.Q @ x + u @ env.R @ u)
                x = env.A @ x + env.B @ u + cholw @ rng.standard_normal(n)
            values = np.zeros(H) if value_fn is None else np.asarray(value_fn(xs), dtype=np.float64)
            episodes.append(Episode(xs, us, rewards, values, policy.log_prob(theta, xs, us)))
            total += H
    else:
        raise TypeError(f"unsupported environment {type(env).__name__}")
    return RolloutBatch(episodes, gamma=gamma, lam=lam)


# exact oracles ----------------------------------------------------------------

def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iters: int = 100_000):
    """Optimal values ``V*`` and ``eta* = rho0' V*``.

    For ``gamma < 1`` iterates the Bellman optimality operator until its
    residual is below ``tol``. For ``gamma == 1`` runs ``horizon`` backward
    steps instead.
    """
    V = np.zeros(mdp.n_states)
    live = ~mdp.terminal
    if mdp.gamma >= 1.0:
        for _ in range(mdp.horizon):
            V = np.where(live, np.max(mdp.r + mdp.P @ V, axis=1), 0.0)
        return V, float(mdp.rho0 @ V)
    for _ in range(max_iters):
        V_new = np.where(live, np.max(mdp.r + mdp.gamma * (mdp.P @ V), axis=1), 0.0)
        if np.max(np.abs(V_new - V)) <= tol:
            V = V_new
            break
        V = V_new
    return V, float(mdp.rho0 @ V)


def bellman_residual(mdp: TabularMdp, V) -> float:
    backup = np.where(~mdp.terminal, np.max(mdp.r + mdp.gamma * (mdp.P @ V), axis=1), 0.0)
    return float(np.max(np.abs(backup - V)))


@dataclass(frozen=True)
class PolicyValues:
    V: np.ndarray
    Q: np.ndarray
    eta: float
    probs: np.ndarray = field(repr=False)

    @property
    def advantages(self) -> np.ndarray:
        return self.Q - self.V[:, None]


def policy_evaluation(mdp: TabularMdp, policy, theta) -> PolicyValues:
    """Exact ``V_pi``, ``Q_pi`` and ``eta`` by a linear solve over live states."""
    probs = policy.probs(theta)
    P_pi = np.einsum("sa,sat->st", probs, mdp.P)
    r_pi = np.sum(probs * mdp.r, axis=1)
    live = np.flatnonzero(~mdp.terminal)
    M = np.eye(live.size) - mdp.gamma * P_pi[np.ix_(live, live)]
    if np.linalg.cond(M) > 1e14:
        raise SingularSystem("I - gamma P_pi is singular")
    V = np.zeros(mdp.n_states)
    V[live] = np.linalg.solve(M, r_pi[live])
    Q = mdp.r + mdp.gamma * (mdp.P @ V)
    Q[mdp.terminal] = 0.0
    return PolicyValues(V, Q, float(mdp.rho0 @ V), probs)


def greedy_theta(mdp: TabularMdp, V, scale: float = 50.0) -> np.ndarray:
    """Softmax logits that put (almost) all mass on greedy actions w.r.t. ``V``."""
    Q = mdp.r + mdp.gamma * (mdp.P @ V)
    logits = np.zeros_like(Q)
    logits[np.arange(mdp.n_states), np.argmax(Q, axis=1)] = scale
    return logits.ravel()


def state_visitation(mdp: TabularMdp, policy, theta, discounted: bool = False) -> np.ndarray:
    """Expected share of sampled steps spent in each state (horizon-truncated).

    With ``discounted=True`` the per-step weights are ``gamma^t`` and the
    result is the unnormalized discounted visitation frequency instead.
    """
    probs = policy.probs(theta)
    P_pi = np.einsum("sa,sat->st", probs, mdp.P)
    d = mdp.rho0 * ~mdp.terminal
    acc = np.zeros(mdp.n_states)
    w = 1.0
    for _ in range(mdp.horizon):
        acc += w * d
        d = (d @ P_pi) * ~mdp.terminal
        if discounted:
            w *= mdp.gamma
    return acc if discounted else acc / acc.sum()


@dataclass(frozen=True)
class EvalReport:
    mean_discounted_return: float
    std: float
    episodes: int

    @property
    def std_error(self) -> float:
        return self.std / np.sqrt(max(self.episodes, 1))


def evaluate(env, policy, theta, n_episodes: int = 100, seed=None) -> EvalReport:
    """Monte-Carlo discounted return on fresh rollouts."""
    rng = _rng(seed)
    rets = []
    for _ in range(n_episodes):
        b = sample_batch(env, policy, theta, 1, rng)
        e = b.episodes[0]
        rets.append(float(np.sum(e.rewards * env.gamma ** np.arange(len(e)))))
    rets = np.array(rets)
    return EvalReport(float(rets.mean()), float(rets.std(ddof=1)) if len(rets) > 1 else 0.0, n_episodes)


def make_env(spec: dict):
    """Build an environment from a config mapping (``type`` selects the kind)."""
    spec = dict(spec)
    kind = spec.pop("type", "gridworld")
    if kind == "gridworld":
        return gridworld(**spec)
    if kind == "tabular":
        return TabularMdp(**spec)
    if kind == "lqg":
        if not any(k in spec for k in ("A", "B")):
            return default_lqg(**spec)
        return LqgEnv(**spec)
    raise ValueError(f"unknown environment type {kind!r}")
