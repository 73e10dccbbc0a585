"""Long-tailed class counts, a Dirichlet split across clients, and how skewed it is."""

from __future__ import annotations

import numpy as np

from captsim.dataspace import LongTailSpec, dirichlet_partition, head_mid_tail, longtail_counts, priors
from captsim.diagnostics import delta_pi_sq

counts = longtail_counts(LongTailSpec(num_classes=10, n_max=500, imbalance_ratio=100.0))
print("class counts:", counts.tolist())

split = head_mid_tail(counts)
print("head", sorted(split.head), "mid", sorted(split.mid), "tail", sorted(split.tail))

# 8 clients, strong skew
part = dirichlet_partition(counts, num_clients=8, alpha_dir=0.1, seed=0, min_client_size=1)
print(part.matrix)
print("columns still sum to the counts:", bool(np.all(part.class_counts == counts)))

pr = priors(part)
np.set_printoptions(precision=3, suppress=True)
print("global prior:", pr.global_)
print("client 0 prior:", pr.per_client[0])

# skew grows as alpha_dir shrinks and as the imbalance grows
for alpha in (0.05, 0.1, 0.5, 5.0):
    vals = [delta_pi_sq(dirichlet_partition(counts, 20, alpha, s, 1)) for s in range(20)]
    print(f"alpha_dir={alpha:<5} mean delta_pi2={np.mean(vals):.4f}")
for rho in (10.0, 50.0, 100.0):
    c = longtail_counts(LongTailSpec(10, 500, rho))
    vals = [delta_pi_sq(dirichlet_partition(c, 20, 0.1, s, 1)) for s in range(50)]
    print(f"rho={rho:<5} mean delta_pi2={np.mean(vals):.4f}")
