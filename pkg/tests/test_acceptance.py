"""One test per acceptance criterion; each records a PASS/FAIL line shown in the run summary."""

import itertools
import math
import time

import numpy as np

from captsim.cli import run_command
from captsim.clustering import complementarity, js_divergence, kmeans
from captsim.config import benchmark_config, dump_config
from captsim.dataspace import HeadMidTailSplit, LongTailSpec, dirichlet_partition, longtail_counts
from captsim.diagnostics import bound_check, delta_pi_sq, variance_decomposition
from captsim.federation import run_baseline_round, run_experiment, run_round, setup
from captsim.objectives import total_loss_and_grads
from captsim.scheduler import Arm, BanditState, mab_select, mab_update

from conftest import ACCEPTANCE_LINES
from instances import brute_force_sse, central_fd, bound_grid, make_instance, multi_client


def record(number, ok, detail, elapsed, limit):
    ok_all = ok and elapsed < limit
    ACCEPTANCE_LINES.append(
        f"criterion {number}: {'PASS' if ok_all else 'FAIL'}  {detail}  [{elapsed:.2f}s < {limit:g}s]"
    )
    return ok_all


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        enc, state, z, labels, prior = make_instance(seed, d=8, c=5, n=16)
        _, grads = total_loss_and_grads(enc, state, z, labels, prior, 0.5, 0.7)
        fd = central_fd(enc, state, z, labels, prior, 0.5, 0.7, h=1e-5)
        an = grads.flat()
        rel = np.abs(an - fd) / np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-6)
        worst = max(worst, float(rel.max()))
    ok = record(1, worst <= 1e-4, f"max relative error {worst:.2e} <= 1e-4", time.perf_counter() - t0, 5)
    assert ok


def test_criterion_2_variance_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        clients, enc, state, prior, _ = multi_client(seed, 3 + seed % 3, 4)
        worst = max(worst, variance_decomposition(clients, enc, state, prior, 0.5, 1.0).identity_gap)
    ok = record(2, worst <= 1e-6, f"max relative gap {worst:.2e} <= 1e-6", time.perf_counter() - t0, 5)
    assert ok


def test_criterion_3_between_client_bound():
    t0 = time.perf_counter()
    held, ratio = 0, 0.0
    grid = bound_grid()
    for seed, k, c in grid:
        clients, enc, state, prior, part = multi_client(seed, k, c)
        rep = bound_check(clients, enc, state, prior, 0.5, 1.0, part)
        held += bool(rep.bound_holds)
        ratio = max(ratio, rep.between / rep.bound if rep.bound > 0 else 0.0)
    ok = record(
        3, held == len(grid), f"bound held {held}/{len(grid)}, max between/bound {ratio:.3f}",
        time.perf_counter() - t0, 30,
    )
    assert ok


def test_criterion_4_heterogeneity_monotone():
    t0 = time.perf_counter()
    means = []
    for rho in (10.0, 50.0, 100.0):
        counts = longtail_counts(LongTailSpec(10, 500, rho))
        means.append(float(np.mean([delta_pi_sq(dirichlet_partition(counts, 20, 0.1, s, 1)) for s in range(50)])))
    ok = means[0] < means[1] < means[2]
    detail = "mean delta_pi2 at rho 10/50/100: " + " < ".join(f"{m:.4f}" for m in means)
    assert record(4, ok, detail, time.perf_counter() - t0, 10)


def test_criterion_5_distance_and_kmeans_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    failures = []
    split = HeadMidTailSplit(frozenset({0, 1}), frozenset({2}), frozenset({3, 4, 5}))
    for _ in range(500):
        p, q = rng.dirichlet(np.full(6, 0.5)), rng.dirichlet(np.full(6, 0.5))
        a, b = js_divergence(p, q), js_divergence(q, p)
        if abs(a - b) > 1e-12 or not (0 < a <= math.log(2) + 1e-12) or js_divergence(p, p) > 1e-15:
            failures.append("js")
        if not 0 <= complementarity(p, q, split) <= 1:
            failures.append("complementarity")
    for n, k, seed in itertools.product((4, 6, 8, 10, 12), (2, 3), range(2)):
        x = np.random.default_rng(100 * n + 10 * k + seed).standard_normal((n, 2))
        res = kmeans(x, k, seed)
        if np.any(np.diff(res.sse_history) > 1e-12):
            failures.append("kmeans monotone")
        if res.sse > brute_force_sse(x, k) + 1e-9:
            failures.append(f"kmeans optimal n={n} k={k}")
    ok = not failures
    assert record(5, ok, f"{len(failures)} property violations", time.perf_counter() - t0, 10), failures


def test_criterion_6_bandit():
    t0 = time.perf_counter()
    arms = (Arm(1, 1), Arm(1, 2), Arm(1, 3))
    means = (0.2, 0.5, 0.8)
    freqs = []
    for seed in range(10):
        state = BanditState(arms, seed=seed)
        env = np.random.default_rng(10_000 + seed)
        late = 0
        for pull in range(2000):
            arm = mab_select(state)
            i = state.index(arm)
            mab_update(state, arm, float(env.random() < means[i]))
            late += pull >= 1500 and i == 2
        freqs.append(late / 500)
    freq = float(np.mean(freqs))
    state = BanditState(arms, eta0=1.0)
    rewards = np.random.default_rng(1).uniform(-1, 1, 200)
    for r in rewards:
        mab_update(state, arms[1], r)
    mean_err = abs(state.values[1] - rewards.mean())
    ok = freq >= 0.9 and mean_err <= 1e-12
    detail = f"best-arm frequency {freq:.3f} >= 0.90, sample-mean error {mean_err:.1e} <= 1e-12"
    assert record(6, ok, detail, time.perf_counter() - t0, 5)


def test_criterion_7_collapse_equivalence():
    t0 = time.perf_counter()
    common = dict(seed=3, protocol__rounds=10, protocol__k_sim=1, protocol__k_het=1)
    e = benchmark_config().protocol.local_epochs
    capt = setup(benchmark_config(method="capt", protocol__arm_grid=[[e, 1]], **common))
    base = setup(benchmark_config(method="baseline", **common))
    worst = 0.0
    for _ in range(10):
        run_round(capt)
        run_baseline_round(base)
        worst = max(worst, float(np.max(np.abs(capt.server.prompts.general - base.server.prompts.general))))
    ok = worst <= 1e-9
    assert record(7, ok, f"max general-prompt gap over 10 rounds {worst:.1e} <= 1e-9", time.perf_counter() - t0, 30)


def _final(method, alpha, seed):
    cfg = benchmark_config(seed=seed, method=method, dataset__alpha_dir=alpha)
    return run_experiment(cfg).logs[-1].metrics


def test_criterion_8_directional_benchmark():
    t0 = time.perf_counter()
    seeds = (0, 1, 2)
    runs = {
        (m, a): [_final(m, a, s) for s in seeds]
        for m, a in (("capt", 0.1), ("baseline", 0.1), ("baseline", 0.05), ("baseline", 0.5), ("capt", 0.05))
    }

    def mean(key, attr):
        return float(np.mean([getattr(r, attr) for r in runs[key]]))

    def gap(key):
        return mean(key, "head") - mean(key, "tail")

    tail_gain = 100 * (mean(("capt", 0.1), "tail") - mean(("baseline", 0.1), "tail"))
    overall_gain = 100 * (mean(("capt", 0.1), "overall") - mean(("baseline", 0.1), "overall"))
    ok_a = tail_gain >= 5.0
    ok_b = overall_gain >= -1.0
    ok_c = gap(("baseline", 0.05)) > gap(("baseline", 0.5)) and gap(("capt", 0.05)) < gap(("baseline", 0.05))
    detail = (
        f"(a) tail +{tail_gain:.2f} pts >= 5; (b) overall {overall_gain:+.2f} pts >= -1; "
        f"(c) baseline gap {gap(('baseline', 0.05)):.3f} at 0.05 vs {gap(('baseline', 0.5)):.3f} at 0.5, "
        f"capt gap at 0.05 {gap(('capt', 0.05)):.3f}"
    )
    assert record(8, ok_a and ok_b and ok_c, detail, time.perf_counter() - t0, 300)


def test_criterion_9_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "bench.toml"
    cfg.write_text(dump_config(benchmark_config(seed=7)))
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [run_command(["train", "--config", str(cfg), "--out", str(o)]) for o in outs]
    same = codes == [0, 0] and (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    assert record(9, same, f"exit codes {codes}, metrics byte-identical: {same}", time.perf_counter() - t0, 60)
