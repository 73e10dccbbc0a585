"""Grouping clients two ways, then letting a bandit pick the training schedule."""

from __future__ import annotations

import numpy as np

from captsim.clustering import assign_clusters, build_matrices, js_divergence
from captsim.dataspace import LongTailSpec, dirichlet_partition, head_mid_tail, longtail_counts, priors
from captsim.scheduler import DEFAULT_ARMS, Arm, BanditState, mab_select, mab_update

counts = longtail_counts(LongTailSpec(10, 500, 100.0))
part = dirichlet_partition(counts, 8, 0.1, seed=4, min_client_size=1)
pr = priors(part)
split = head_mid_tail(counts)

print("JS between client 0 and 1:", round(js_divergence(pr.per_client[0], pr.per_client[1]), 4))
s, comp = build_matrices(pr, split)
np.set_printoptions(precision=2, suppress=True)
print("JS matrix\n", s.values)
print("complementarity matrix\n", comp.values)

sim, het = assign_clusters(pr, split, k_sim=3, k_het=3, seed=0)
print("similarity clusters   ", [m.tolist() for m in sim.members()])
print("heterogeneity clusters", [m.tolist() for m in het.members()])

# a stationary Bernoulli bandit: the 0.8 arm should take over
arms = (Arm(1, 1), Arm(1, 2), Arm(1, 5))
state = BanditState(arms, seed=0)
env = np.random.default_rng(1)
picks = []
for _ in range(2000):
    arm = mab_select(state)
    i = state.index(arm)
    mab_update(state, arm, float(env.random() < (0.2, 0.5, 0.8)[i]))
    picks.append(i)
print("values", state.values.round(3), "counts", state.counts)
print("share of best arm in the last 500 pulls:", np.mean(np.array(picks[-500:]) == 2))
print("default grid:", [(a.intra_iters, a.global_period) for a in DEFAULT_ARMS])
