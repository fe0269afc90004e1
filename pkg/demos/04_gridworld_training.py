"""
QNTRPO against TRPO on a gridworld
==================================

Both algorithms use the same batches at episode 0, the same trust radius
(0.1) and the same Fisher metric. TRPO takes one natural-gradient step per
batch; QNTRPO runs up to ten trust-region iterations on the same surrogate.
Performance is the exact discounted return of the current policy, computed
from the known transition model.
"""

import dataclasses

import numpy as np

from qntrpo.driver import TrainConfig, optimal_eta, qntrpo_train, threshold_for
from qntrpo.envs import gridworld

eta_star = optimal_eta(gridworld())
threshold = threshold_for(eta_star, 0.95)
print(f"optimal return {eta_star:.4f}; 95% threshold {threshold:.4f}\n")

cfg = TrainConfig(episodes=20, seed=0)
curves = {}
for alg in ("QNTRPO", "TRPO"):
    _, recs = qntrpo_train(dataclasses.replace(cfg, algorithm=alg))
    curves[alg] = np.array([r.eta for r in recs])
    ms = np.mean([r.wall_ms for r in recs])
    evals = max(r.evaluations for r in recs)
    print(f"{alg:7s} mean episode time {ms:6.1f} ms, at most {evals} objective evaluations per episode")

print("\nepisode   QNTRPO     TRPO")
for i in range(cfg.episodes):
    print(f"{i + 1:7d}  {curves['QNTRPO'][i]:.4f}   {curves['TRPO'][i]:.4f}")

for alg, c in curves.items():
    hit = np.flatnonzero(c >= threshold)
    print(f"{alg}: threshold reached after {hit[0] + 1 if hit.size else 'never'} episodes")
