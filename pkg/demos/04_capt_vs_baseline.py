"""Paired runs of the clustered dual-prompt method and single-prompt FedAvg on the benchmark setting."""

from __future__ import annotations

import numpy as np

from captsim.config import benchmark_config
from captsim.federation import run_experiment

rows = []
for alpha in (0.05, 0.1, 0.5):
    for method in ("baseline", "capt"):
        finals = [
            run_experiment(benchmark_config(seed=s, method=method, dataset__alpha_dir=alpha)).logs[-1].metrics
            for s in range(3)
        ]
        mean = {k: np.mean([getattr(f, k) for f in finals]) for k in ("overall", "head", "mid", "tail")}
        rows.append((alpha, method, mean))

print(f"{'alpha':>6} {'method':>9} {'overall':>8} {'head':>6} {'mid':>6} {'tail':>6} {'gap':>6}")
for alpha, method, m in rows:
    print(
        f"{alpha:>6} {method:>9} {m['overall']:8.3f} {m['head']:6.3f} {m['mid']:6.3f} {m['tail']:6.3f}"
        f" {m['head'] - m['tail']:6.3f}"
    )

# one trajectory in detail
sim = run_experiment(benchmark_config(seed=0))
for e in sim.logs[::10]:
    print(e.round, (e.arm.intra_iters, e.arm.global_period), e.global_agg, round(e.metrics.tail, 3), e.reward)
