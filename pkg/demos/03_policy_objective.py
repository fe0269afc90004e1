"""
Surrogate objective, advantages and the Fisher metric
=====================================================

One batch from a 5x5 gridworld under the uniform policy. We build the
advantage estimates, the negated importance-sampled surrogate, and the
Fisher operator that defines the trust region, and check the Fisher matrix
against a finite-difference Hessian of the mean KL divergence.
"""

import numpy as np

from qntrpo.envs import gridworld, policy_evaluation, sample_batch
from qntrpo.policy import (
    SurrogateObjective,
    TabularSoftmax,
    default_damping,
    fisher_operator,
    gae_advantages,
    mean_kl,
)

env = gridworld()
policy = TabularSoftmax(env.n_states, env.n_actions)
theta = policy.initial_theta()

# exact state values as the baseline
V = policy_evaluation(env, policy, theta).V
batch = sample_batch(env, policy, theta, 2000, seed=0, value_fn=lambda s: V[s])
batch = gae_advantages(batch)
print(f"{len(batch.episodes)} episodes, {batch.n_steps} steps, success rate {batch.mean_return():.2f}")
print(f"advantages: mean {batch.advantages.mean():.1e}, std {batch.advantages.std():.3f}")

obj = SurrogateObjective(policy, batch, theta)
f0, g0 = obj(theta)
print(f"f(theta_old) = {f0:.2e}, |grad| = {np.linalg.norm(g0):.4f}")

# Fisher matrix vs a finite-difference Hessian of mean KL, along a few directions
F = fisher_operator(policy, theta, batch, default_damping(policy, theta, batch))
rng = np.random.default_rng(1)
h = 1e-4
for _ in range(3):
    v = rng.standard_normal(policy.dim)
    kl = lambda t: mean_kl(policy, theta, theta + t * v, batch)  # noqa: E731
    curvature_fd = (kl(h) - 2 * kl(0.0) + kl(-h)) / h**2
    print(f"v'Fv = {v @ F(v):.6f}   d2/dt2 KL = {curvature_fd:.6f}")

# a natural-gradient step of squared metric length 0.01 changes KL by about 0.005
d = -np.linalg.solve(F.to_dense(), g0)
d *= np.sqrt(0.01 / (d @ F(d)))
print(f"\nstep with d'Fd = 0.01: mean KL = {mean_kl(policy, theta, theta + d, batch):.5f}, "
      f"f = {obj.value(theta + d):.4f}")
