"""
A linear-quadratic regulator with a Gaussian policy
===================================================

The double integrator with process noise. The Riccati equation gives the
best linear feedback, and the expected cost of any linear Gaussian policy
is computed exactly by propagating the state covariance. Values are fitted
by least squares on quadratic features of the state.
"""

import numpy as np

from qntrpo.driver import TrainConfig, exact_eta, optimal_eta, qntrpo_train
from qntrpo.envs import default_lqg, riccati_gain
from qntrpo.policy import LinearGaussian

env = default_lqg()
K, P = riccati_gain(env)
print("Riccati gain", K.ravel(), " optimal return", round(optimal_eta(env), 3))

cfg = TrainConfig(env={"type": "lqg"}, policy={"family": "linear_gaussian"},
                  batch_size=1000, episodes=30, value_baseline="fitted", seed=0)
theta, recs = qntrpo_train(cfg)
policy = LinearGaussian(env.state_dim, env.action_dim)
W, log_std = policy.unpack(theta)

print("initial return", round(exact_eta(env, policy, policy.initial_theta()), 2))
for r in recs[::5]:
    print(f"  episode {r.episode:3d}: return {r.eta:9.3f}, KL step {r.kl:.3f}")
print("learned gain ", -W.ravel(), " action std", np.exp(log_std))
print("final return ", round(recs[-1].eta, 3))
