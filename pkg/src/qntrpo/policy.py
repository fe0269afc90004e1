"""Policy families, rollout batches and the surrogate objective.

Two families with analytic scores, KL divergences and Fisher products:

* :class:`TabularSoftmax` for discrete MDPs (one logit per state-action),
* :class:`LinearGaussian` for continuous actions (mean ``W phi(s)``,
  state-independent log standard deviations).

The objective minimized per policy iteration is the negated importance
sampled surrogate ``f(theta) = -mean(pi_theta / pi_old * A)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from qntrpo.errors import DimensionMismatch, EmptyBatch, NonFiniteRatio
from qntrpo.linalg import SpdOperator

LOG_2PI = math.log(2.0 * math.pi)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class TabularSoftmax:
    """``pi(a|s) = softmax(theta[s, :])[a]`` with ``theta`` flattened row-major."""

    family = "tabular_softmax"
    discrete = True

    def __init__(self, n_states: int, n_actions: int):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        self.dim = self.n_states * self.n_actions

    def __repr__(self):
        return f"TabularSoftmax(n_states={self.n_states}, n_actions={self.n_actions})"

    def initial_theta(self) -> np.ndarray:
        return np.zeros(self.dim)

    def _table(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise DimensionMismatch(f"theta has shape {theta.shape}, policy expects ({self.dim},)")
        return theta.reshape(self.n_states, self.n_actions)

    def log_probs_table(self, theta) -> np.ndarray:
        return _log_softmax(self._table(theta))

    def probs(self, theta) -> np.ndarray:
        return np.exp(self.log_probs_table(theta))

    def log_prob(self, theta, states, actions) -> np.ndarray:
        return self.log_probs_table(theta)[np.asarray(states), np.asarray(actions)]

    def weighted_score(self, theta, states, actions, weights) -> np.ndarray:
        """``sum_t w_t grad log pi(a_t|s_t)``."""
        states = np.asarray(states)
        p = self.probs(theta)
        G = np.zeros((self.n_states, self.n_actions))
        np.add.at(G, (states, np.asarray(actions)), weights)
        G -= np.bincount(states, weights=weights, minlength=self.n_states)[:, None] * p
        return G.ravel()

    def kl(self, theta_old, theta, states) -> np.ndarray:
        lp_old = self.log_probs_table(theta_old)
        lp = self.log_probs_table(theta)
        per_state = np.sum(np.exp(lp_old) * (lp_old - lp), axis=1)
        return per_state[np.asarray(states)]

    def _state_weights(self, states) -> np.ndarray:
        states = np.asarray(states)
        return np.bincount(states, minlength=self.n_states) / states.shape[0]

    def fisher_vector(self, theta_old, states, v) -> np.ndarray:
        w = self._state_weights(states)[:, None]
        p = self.probs(theta_old)
        V = np.asarray(v, dtype=np.float64).reshape(self.n_states, self.n_actions)
        return (w * (p * V - p * np.sum(p * V, axis=1, keepdims=True))).ravel()

    def fisher_diagonal(self, theta_old, states) -> np.ndarray:
        w = self._state_weights(states)[:, None]
        p = self.probs(theta_old)
        return (w * p * (1.0 - p)).ravel()

    def sample_action(self, theta, state, rng) -> int:
        cdf = np.cumsum(self.probs(theta)[state])
        return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), self.n_actions - 1))


class LinearGaussian:
    """Diagonal Gaussian with mean ``W phi(s)`` and per-dimension log-std.

    ``theta = [W.ravel(), log_std]`` with ``W`` of shape
    ``(action_dim, n_features)``. States passed in are already feature
    vectors.
    """

    family = "linear_gaussian"
    discrete = False

    def __init__(self, n_features: int, action_dim: int, init_log_std: float = 0.0):
        self.n_features = int(n_features)
        self.action_dim = int(action_dim)
        self.init_log_std = float(init_log_std)
        self.dim = self.action_dim * self.n_features + self.action_dim

    def __repr__(self):
        return f"LinearGaussian(n_features={self.n_features}, action_dim={self.action_dim})"

    def initial_theta(self) -> np.ndarray:
        theta = np.zeros(self.dim)
        theta[-self.action_dim:] = self.init_log_std
        return theta

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise DimensionMismatch(f"theta has shape {theta.shape}, policy expects ({self.dim},)")
        n = self.action_dim * self.n_features
        return theta[:n].reshape(self.action_dim, self.n_features), theta[n:]

    def pack(self, W, log_std) -> np.ndarray:
        return np.concatenate([np.asarray(W, dtype=np.float64).ravel(), np.asarray(log_std, dtype=np.float64)])

    def mean(self, theta, states) -> np.ndarray:
        W, _ = self.unpack(theta)
        return np.atleast_2d(states) @ W.T

    def log_prob(self, theta, states, actions) -> np.ndarray:
        W, log_std = self.unpack(theta)
        mu = np.atleast_2d(states) @ W.T
        z = (np.atleast_2d(actions) - mu) * np.exp(-log_std)
        return np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=1)

    def weighted_score(self, theta, states, actions, weights) -> np.ndarray:
        W, log_std = self.unpack(theta)
        phi = np.atleast_2d(states)
        diff = np.atleast_2d(actions) - phi @ W.T
        inv_var = np.exp(-2.0 * log_std)
        wz = np.asarray(weights)[:, None] * diff * inv_var
        gW = wz.T @ phi
        g_log_std = np.asarray(weights) @ (diff**2 * inv_var - 1.0)
        return self.pack(gW, g_log_std)

    def kl(self, theta_old, theta, states) -> np.ndarray:
        W0, ls0 = self.unpack(theta_old)
        W1, ls1 = self.unpack(theta)
        phi = np.atleast_2d(states)
        dmu = phi @ (W0 - W1).T
        var0 = np.exp(2.0 * ls0)
        var1 = np.exp(2.0 * ls1)
        return np.sum(ls1 - ls0 + (var0 + dmu**2) / (2.0 * var1) - 0.5, axis=1)

    def fisher_vector(self, theta_old, states, v) -> np.ndarray:
        _, log_std = self.unpack(theta_old)
        phi = np.atleast_2d(states)
        C = phi.T @ phi / phi.shape[0]
        VW, v_ls = self.unpack(v)
        return self.pack(np.exp(-2.0 * log_std)[:, None] * (VW @ C), 2.0 * v_ls)

    def fisher_diagonal(self, theta_old, states) -> np.ndarray:
        _, log_std = self.unpack(theta_old)
        phi = np.atleast_2d(states)
        c_diag = np.mean(phi**2, axis=0)
        return self.pack(np.exp(-2.0 * log_std)[:, None] * c_diag[None, :], np.full(self.action_dim, 2.0))

    def sample_action(self, theta, state, rng) -> np.ndarray:
        W, log_std = self.unpack(theta)
        return W @ state + np.exp(log_std) * rng.standard_normal(self.action_dim)


def make_policy(spec: dict, env) -> "TabularSoftmax | LinearGaussian":
    """Build a policy from a config mapping and the environment it acts in."""
    family = spec.get("family", "tabular_softmax")
    if family == "tabular_softmax":
        return TabularSoftmax(env.n_states, env.n_actions)
    if family == "linear_gaussian":
        return LinearGaussian(env.state_dim, env.action_dim, init_log_std=spec.get("init_log_std", 0.0))
    raise ValueError(f"unknown policy family {family!r}")


@dataclass(frozen=True)
class Episode:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    logp_old: np.ndarray

    def __len__(self):
        return int(self.rewards.shape[0])

    @property
    def undiscounted_return(self) -> float:
        return float(np.sum(self.rewards))


@dataclass(frozen=True)
class RolloutBatch:
    episodes: List[Episode]
    gamma: float = 0.99
    lam: float = 0.97
    advantages: Optional[np.ndarray] = None
    normalized: bool = False

    @property
    def n_steps(self) -> int:
        return sum(len(e) for e in self.episodes)

    @property
    def states(self) -> np.ndarray:
        return np.concatenate([e.states for e in self.episodes])

    @property
    def actions(self) -> np.ndarray:
        return np.concatenate([e.actions for e in self.episodes])

    @property
    def rewards(self) -> np.ndarray:
        return np.concatenate([e.rewards for e in self.episodes])

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([e.values for e in self.episodes])

    @property
    def logp_old(self) -> np.ndarray:
        return np.concatenate([e.logp_old for e in self.episodes])

    def mean_return(self) -> float:
        return float(np.mean([e.undiscounted_return for e in self.episodes]))

    def discounted_returns(self) -> np.ndarray:
        """Per-step discounted reward-to-go within each episode."""
        out = []
        for e in self.episodes:
            ret = np.zeros(len(e))
            acc = 0.0
            for t in range(len(e) - 1, -1, -1):
                acc = e.rewards[t] + self.gamma * acc
                ret[t] = acc
            out.append(ret)
        return np.concatenate(out) if out else np.zeros(0)


def gae_advantages(batch: RolloutBatch, normalize: bool = True) -> RolloutBatch:
    """Generalized advantage estimates, batch-normalized by default.

    ``A_t = sum_l (gamma lam)^l delta_{t+l}`` with TD residuals
    ``delta_t = r_t + gamma V(s_{t+1}) - V(s_t)`` and ``V = 0`` past the last
    step of every episode.
    """
    if not batch.episodes or batch.n_steps == 0:
        raise EmptyBatch("cannot estimate advantages of an empty batch")
    g, lam = batch.gamma, batch.lam
    parts = []
    for e in batch.episodes:
        v_next = np.append(e.values[1:], 0.0)
        td = e.rewards + g * v_next - e.values
        adv = np.zeros(len(e))
        acc = 0.0
        for t in range(len(e) - 1, -1, -1):
            acc = td[t] + g * lam * acc
            adv[t] = acc
        parts.append(adv)
    adv = np.concatenate(parts)
    normalized = False
    if normalize:
        adv = adv - adv.mean()
        std = adv.std()
        if std > 1e-12:
            adv = adv / std
            normalized = True
        else:
            adv = np.zeros_like(adv)
    return replace(batch, advantages=adv, normalized=normalized)


class SurrogateObjective:
    """``theta -> (f, grad f)`` with ``f = -mean(exp(logp - logp_old) * A)``.

    Counts calls in ``evaluations``.
    """

    def __init__(self, policy, batch: RolloutBatch, theta_old):
        if batch.advantages is None:
            raise ValueError("batch has no advantages; run gae_advantages first")
        self.policy = policy
        self.batch = batch
        self.theta_old = np.asarray(theta_old, dtype=np.float64).copy()
        self._states = batch.states
        self._actions = batch.actions
        self._logp_old = batch.logp_old
        self._adv = batch.advantages
        self._n = self._adv.shape[0]
        self.evaluations = 0

    def ratios(self, theta) -> np.ndarray:
        with np.errstate(over="ignore"):
            r = np.exp(self.policy.log_prob(theta, self._states, self._actions) - self._logp_old)
        if not np.all(np.isfinite(r)):
            raise NonFiniteRatio("importance ratio overflowed")
        return r

    def value(self, theta) -> float:
        return -float(np.mean(self.ratios(theta) * self._adv))

    def __call__(self, theta):
        self.evaluations += 1
        r = self.ratios(theta)
        w = r * self._adv
        f = -float(np.mean(w))
        g = -self.policy.weighted_score(theta, self._states, self._actions, w) / self._n
        return f, g

    def mean_kl(self, theta) -> float:
        return mean_kl(self.policy, self.theta_old, theta, self.batch)


def surrogate_value_grad(obj: SurrogateObjective, theta):
    return obj(theta)


def policy_gradient_estimate(policy, batch: RolloutBatch, theta_old) -> np.ndarray:
    """``-mean(grad log pi_old * A)``; equals the surrogate gradient at ``theta_old``."""
    return -policy.weighted_score(theta_old, batch.states, batch.actions, batch.advantages) / batch.n_steps


def mean_kl(policy, theta_old, theta, batch: RolloutBatch) -> float:
    """Batch-state average of ``KL(pi_old(.|s) || pi_theta(.|s))``."""
    return float(np.mean(policy.kl(theta_old, theta, batch.states)))


def fisher_operator(policy, theta_old, batch: RolloutBatch, damping: float = 0.0) -> SpdOperator:
    """``v -> (F + damping I) v``, ``F`` the Hessian of :func:`mean_kl` at ``theta_old``."""
    if damping < 0:
        raise ValueError("damping must be nonnegative")
    states = batch.states
    theta_old = np.asarray(theta_old, dtype=np.float64).copy()

    def apply(v):
        return policy.fisher_vector(theta_old, states, v) + damping * v

    return SpdOperator(policy.dim, apply=apply)


def default_damping(policy, theta_old, batch: RolloutBatch, coef: float = 1e-4) -> float:
    """``coef`` times the mean diagonal entry of the Fisher matrix."""
    return coef * float(np.mean(policy.fisher_diagonal(theta_old, batch.states)))


# columnar transition log ---------------------------------------------------

def _columns(arr, prefix):
    arr = np.asarray(arr)
    if arr.ndim == 1:
        return [prefix]
    return [f"{prefix}_{i}" for i in range(arr.shape[1])]


def write_batch_csv(batch: RolloutBatch, path) -> None:
    """One row per transition; floats written with ``repr`` so they round-trip."""
    first = batch.episodes[0]
    s_cols = _columns(first.states, "state")
    a_cols = _columns(first.actions, "action")
    header = ["episode", "t", *s_cols, *a_cols, "reward", "value", "logp_old", "advantage"]
    adv = batch.advantages
    with open(path, "w", newline="") as fh:
        fh.write(f"# gamma={batch.gamma!r} lam={batch.lam!r} normalized={int(batch.normalized)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        i = 0
        for ep, e in enumerate(batch.episodes):
            for t in range(len(e)):
                s = np.atleast_1d(e.states[t]).tolist()
                a = np.atleast_1d(e.actions[t]).tolist()
                w.writerow([ep, t, *map(repr, s), *map(repr, a), repr(float(e.rewards[t])),
                            repr(float(e.values[t])), repr(float(e.logp_old[t])),
                            "" if adv is None else repr(float(adv[i]))])
                i += 1


def read_batch_csv(path) -> RolloutBatch:
    with open(path, newline="") as fh:
        meta = dict(kv.split("=") for kv in fh.readline().lstrip("# ").split())
        rows = list(csv.DictReader(fh))
    header = list(rows[0].keys())
    s_cols = [c for c in header if c == "state" or c.startswith("state_")]
    a_cols = [c for c in header if c == "action" or c.startswith("action_")]
    discrete_s = s_cols == ["state"]
    discrete_a = a_cols == ["action"]
    episodes, advs = [], []
    by_ep = {}
    for row in rows:
        by_ep.setdefault(int(row["episode"]), []).append(row)
    for ep in sorted(by_ep):
        rs = by_ep[ep]
        if discrete_s:
            states = np.array([int(r["state"]) for r in rs])
        else:
            states = np.array([[float(r[c]) for c in s_cols] for r in rs])
        if discrete_a:
            actions = np.array([int(r["action"]) for r in rs])
        else:
            actions = np.array([[float(r[c]) for c in a_cols] for r in rs])
        episodes.append(Episode(
            states, actions,
            np.array([float(r["reward"]) for r in rs]),
            np.array([float(r["value"]) for r in rs]),
            np.array([float(r["logp_old"]) for r in rs]),
        ))
        advs.extend(r["advantage"] for r in rs)
    advantages = None if any(a == "" for a in advs) else np.array([float(a) for a in advs])
    return RolloutBatch(episodes, gamma=float(meta["gamma"]), lam=float(meta["lam"]),
                        advantages=advantages, normalized=bool(int(meta["normalized"])))
