"""Federated rounds: local training, clustered aggregation and bandit-gated
global aggregation, plus a single-shared-prompt FedAvg baseline.

Randomness is keyed: every consumer draws from
``SeedSequence([seed, stream, *keys])`` so that, for example, the mini-batch
order of client ``k`` in round ``t`` is the same for the baseline and for
the clustered method given the same top-level seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dataspace as ds
from .clustering import assign_clusters
from .config import RunConfig
from .diagnostics import SplitMetrics, delta_pi_sq, evaluate_split, variance_decomposition
from .objectives import sgd_step, total_loss_and_grads
from .scheduler import (
    Arm,
    BanditState,
    compute_reward,
    mab_select,
    mab_update,
    should_global_aggregate,
)
from .toyclip import EncoderSpec, FrozenEncoders, PromptState, init_encoders, init_prompts, sample_features

log = logging.getLogger(__name__)

# stream tags for derive_rng
ENCODER, PARTITION, CLIENT_DATA, TEST_SET, VAL_SET, PROMPT_INIT, SELECT, TRAIN, CLUSTER, BANDIT = range(10)


def derive_rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, *keys]))


def derive_seed(seed: int, stream: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, stream, *keys]).generate_state(1)[0])


@dataclass
class ClientState:
    id: int
    counts: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    prompts: PromptState

    @property
    def size(self) -> int:
        return int(self.labels.size)


@dataclass
class ServerState:
    prompts: PromptState
    prior: np.ndarray
    bandit: BanditState | None = None
    arm: Arm = Arm(1, 1)
    last_global_round: int = 0
    round: int = 0
    uploads_since_global: int = 0
    val_acc: float = 0.0


@dataclass
class RoundLog:
    round: int
    participants: list
    sim_clusters: list | None
    het_clusters: list | None
    arm: Arm
    global_agg: bool
    reward: float | None
    comm_units: float | None
    metrics: SplitMetrics
    loss_general: float | None
    loss_class_aware: float | None
    delta_s2: float | None
    delta_pi2: float | None

    def row(self) -> dict:
        return {
            "round": self.round,
            "overall_acc": self.metrics.overall,
            "head_acc": self.metrics.head,
            "mid_acc": self.metrics.mid,
            "tail_acc": self.metrics.tail,
            "loss_general": self.loss_general,
            "loss_class_aware": self.loss_class_aware,
            "delta_s2": self.delta_s2,
            "delta_pi2": self.delta_pi2,
            "arm_E": self.arm.intra_iters,
            "arm_p": self.arm.global_period,
            "reward": self.reward,
            "comm_units": self.comm_units,
            "global_agg_flag": int(self.global_agg),
        }


@dataclass
class Simulation:
    """Everything fixed at setup plus the mutable server and client states."""

    config: RunConfig
    encoders: FrozenEncoders
    partition: ds.Partition
    split: ds.HeadMidTailSplit
    clients: list[ClientState]
    server: ServerState
    test_set: tuple[np.ndarray, np.ndarray]
    val_set: tuple[np.ndarray, np.ndarray]
    logs: list[RoundLog] = field(default_factory=list)

    @property
    def method(self) -> str:
        return self.config.method

    @property
    def eval_mode(self) -> str:
        return "general" if self.method == "baseline" else "integrated"

    @property
    def lam(self) -> float:
        return 0.0 if self.method == "baseline" else self.config.model.lam


def balanced_set(enc: FrozenEncoders, per_class: int, sigma: float, rng) -> tuple[np.ndarray, np.ndarray]:
    labels = np.repeat(np.arange(enc.num_classes), per_class)
    return sample_features(enc, labels, sigma, rng), labels


def setup(config: RunConfig) -> Simulation:
    config.validate()
    d, m = config.dataset, config.model
    seed = config.seed
    counts = ds.longtail_counts(ds.LongTailSpec(d.num_classes, d.n_max, d.imbalance_ratio))
    partition = ds.dirichlet_partition(
        counts, d.num_clients, d.alpha_dir, derive_seed(seed, PARTITION), min_client_size=d.min_client_size
    )
    split = ds.head_mid_tail(counts)
    enc_spec = EncoderSpec(
        embed_dim=m.embed_dim,
        num_classes=d.num_classes,
        feature_noise=m.feature_noise,
        seed=derive_seed(seed, ENCODER),
        text_noise=m.text_noise,
    )
    enc = init_encoders(enc_spec)
    init = init_prompts(enc_spec, m.prompt_len, m.class_prompt_len, m.init_scale, derive_seed(seed, PROMPT_INIT))
    clients = []
    for k in range(d.num_clients):
        labels = np.repeat(np.arange(d.num_classes), partition.matrix[k])
        feats = sample_features(enc, labels, m.feature_noise, derive_rng(seed, CLIENT_DATA, k))
        clients.append(ClientState(k, partition.matrix[k].copy(), feats, labels, init.copy()))
    server = ServerState(prompts=init.copy(), prior=ds.normalize_counts(counts))
    test_set = balanced_set(enc, d.test_per_class, m.feature_noise, derive_rng(seed, TEST_SET))
    val_set = balanced_set(enc, d.val_per_class, m.feature_noise, derive_rng(seed, VAL_SET))
    sim = Simulation(config, enc, partition, split, clients, server, test_set, val_set)
    p = config.protocol
    if config.method == "capt":
        server.bandit = BanditState(
            p.arms,
            eta0=p.eta0,
            epsilon_stab=p.epsilon_stab,
            explore_coeff=p.explore_coeff,
            explore_rate=p.explore_rate,
            score_rule=p.score_rule,
            seed=derive_seed(seed, BANDIT),
        )
        server.arm = mab_select(server.bandit)
    else:
        server.arm = Arm(p.local_epochs, 1)
    server.val_acc = _balanced_acc(sim, server.prompts, sim.val_set)
    return sim


def _balanced_acc(sim: Simulation, prompts: PromptState, data) -> float:
    return evaluate_split(sim.encoders, prompts, data[0], data[1], sim.split, sim.eval_mode).overall


def select_clients(num_clients: int, fraction: float, rng: np.random.Generator) -> list[int]:
    if num_clients < 1:
        raise ValueError("need at least one client")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = max(1, int(round(fraction * num_clients)))
    return sorted(rng.choice(num_clients, size=n, replace=False).tolist())


def local_train(
    client: ClientState,
    enc: FrozenEncoders,
    prior: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    tau: float,
    lam: float,
    rng: np.random.Generator,
) -> tuple[PromptState, list]:
    """Mini-batch SGD on the client's data; returns the new prompts and batch losses."""
    if client.size == 0:
        log.info("client %d holds no data; skipped", client.id)
        return client.prompts, []
    state = client.prompts
    reports = []
    for _ in range(epochs):
        order = rng.permutation(client.size)
        for start in range(0, client.size, batch_size):
            idx = order[start : start + batch_size]
            report, grads = total_loss_and_grads(
                enc, state, client.features[idx], client.labels[idx], prior, tau, lam
            )
            reports.append(report)
            state = sgd_step(state, grads, lr)
    return state, reports


def _weighted(blocks: list[np.ndarray], weights: np.ndarray) -> np.ndarray:
    out = np.zeros_like(blocks[0])
    for w, b in zip(weights, blocks):
        out += w * b
    return out


def _average_general(members: list[ClientState]) -> np.ndarray:
    sizes = np.array([c.size for c in members], dtype=np.float64)
    return _weighted([c.prompts.general for c in members], sizes / sizes.sum())


def _average_align(members: list[ClientState]) -> np.ndarray:
    sizes = np.array([c.size for c in members], dtype=np.float64)
    return _weighted([c.prompts.align_map for c in members], sizes / sizes.sum())


def _average_class_aware(members: list[ClientState], fallback: np.ndarray) -> np.ndarray:
    """Per-class average weighted by per-class counts; classes nobody holds keep ``fallback``."""
    counts = np.stack([c.counts for c in members]).astype(np.float64)  # (n, C)
    totals = counts.sum(axis=0)
    out = fallback.copy()
    held = totals > 0
    if np.any(held):
        w = counts[:, held] / totals[held]
        out[held] = 0.0
        for k, c in enumerate(members):
            out[held] += w[k][:, None, None] * c.prompts.class_aware[held]
    return out


def aggregate_cluster(members: list[ClientState], mode: str) -> None:
    """Average one prompt block over ``members`` and write it back to each of them."""
    if not members:
        raise ValueError("empty cluster")
    members = sorted(members, key=lambda c: c.id)
    if mode == "general":
        agg = _average_general(members)
        for c in members:
            c.prompts = PromptState(agg.copy(), c.prompts.class_aware, c.prompts.align_map)
    elif mode == "class_aware":
        # a class nobody in the cluster holds stays as each member has it
        counts = np.stack([c.counts for c in members])
        held = counts.sum(axis=0) > 0
        agg = _average_class_aware(members, members[0].prompts.class_aware)
        for c in members:
            new = c.prompts.class_aware.copy()
            new[held] = agg[held]
            c.prompts = PromptState(c.prompts.general, new, c.prompts.align_map)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")


def global_aggregate(server: ServerState, active: list[ClientState], all_clients: list[ClientState]) -> PromptState:
    """Average every block over the active clients and broadcast to all clients."""
    if not active:
        raise ValueError("no active clients")
    active = sorted(active, key=lambda c: c.id)
    server.prompts = PromptState(
        _average_general(active),
        _average_class_aware(active, server.prompts.class_aware),
        _average_align(active),
    )
    for c in all_clients:
        c.prompts = server.prompts.copy()
    return server.prompts


def _train_active(sim: Simulation, active: list[ClientState], epochs: int, round_: int):
    cfg = sim.config
    p, m = cfg.protocol, cfg.model
    reports = []
    for c in active:
        rng = derive_rng(cfg.seed, TRAIN, round_, c.id)
        c.prompts, rep = local_train(
            c, sim.encoders, sim.server.prior, epochs, p.lr, p.batch_size, m.tau, sim.lam, rng
        )
        reports.extend(rep)
    return reports


def _round_metrics(sim: Simulation, active: list[ClientState]):
    p = sim.config.protocol
    dpi2 = delta_pi_sq(ds.Partition(np.stack([c.counts for c in active])))
    ds2 = None
    if p.track_gradients:
        report = variance_decomposition(
            [(c.features, c.labels) for c in active],
            sim.encoders,
            sim.server.prompts,
            sim.server.prior,
            sim.config.model.tau,
            sim.lam,
        )
        ds2 = report.between
    metrics = evaluate_split(sim.encoders, sim.server.prompts, *sim.test_set, sim.split, sim.eval_mode)
    return metrics, ds2, dpi2


def _mean_losses(reports):
    if not reports:
        return None, None
    ge = float(np.mean([r.loss_general for r in reports]))
    ca = float(np.mean([r.loss_class_aware for r in reports]))
    return ge, (ca if np.isfinite(ca) else None)


def run_round(sim: Simulation) -> RoundLog:
    """One round of the clustered protocol."""
    cfg = sim.config
    p = cfg.protocol
    server = sim.server
    server.round += 1
    t = server.round
    ids = select_clients(len(sim.clients), p.participation, derive_rng(cfg.seed, SELECT, t))
    active = [sim.clients[i] for i in ids]
    arm = server.arm

    reports = _train_active(sim, active, arm.intra_iters, t)

    act_priors = ds.priors(ds.Partition(np.stack([c.counts for c in active])))
    sim_cl, het_cl = assign_clusters(act_priors, sim.split, p.k_sim, p.k_het, derive_seed(cfg.seed, CLUSTER, t))
    for members in sim_cl.members():
        aggregate_cluster([active[i] for i in members], "class_aware")
    for members in het_cl.members():
        aggregate_cluster([active[i] for i in members], "general")
    server.uploads_since_global += len(active)

    reward = comm = None
    fired = should_global_aggregate(t, server.last_global_round, arm)
    if fired:
        server.uploads_since_global += len(active)
        comm = server.uploads_since_global / len(sim.clients)
        global_aggregate(server, active, sim.clients)
        new_acc = _balanced_acc(sim, server.prompts, sim.val_set)
        reward = compute_reward(server.val_acc, new_acc, comm)
        server.val_acc = new_acc
        mab_update(server.bandit, arm, reward)
        server.arm = mab_select(server.bandit)
        server.last_global_round = t
        server.uploads_since_global = 0

    metrics, ds2, dpi2 = _round_metrics(sim, active)
    loss_ge, loss_ca = _mean_losses(reports)
    entry = RoundLog(
        round=t,
        participants=ids,
        sim_clusters=[[ids[i] for i in mem] for mem in sim_cl.members()],
        het_clusters=[[ids[i] for i in mem] for mem in het_cl.members()],
        arm=arm,
        global_agg=fired,
        reward=reward,
        comm_units=comm,
        metrics=metrics,
        loss_general=loss_ge,
        loss_class_aware=loss_ca,
        delta_s2=ds2,
        delta_pi2=dpi2,
    )
    sim.logs.append(entry)
    return entry


def run_baseline_round(sim: Simulation) -> RoundLog:
    """One round of single-shared-prompt FedAvg (general prompt and alignment map)."""
    cfg = sim.config
    p = cfg.protocol
    server = sim.server
    server.round += 1
    t = server.round
    ids = select_clients(len(sim.clients), p.participation, derive_rng(cfg.seed, SELECT, t))
    active = [sim.clients[i] for i in ids]
    reports = _train_active(sim, active, p.local_epochs, t)
    server.prompts = PromptState(_average_general(active), server.prompts.class_aware, _average_align(active))
    for c in sim.clients:
        c.prompts = server.prompts.copy()
    comm = 2 * len(active) / len(sim.clients)
    metrics, ds2, dpi2 = _round_metrics(sim, active)
    loss_ge, _ = _mean_losses(reports)
    entry = RoundLog(
        round=t,
        participants=ids,
        sim_clusters=None,
        het_clusters=None,
        arm=server.arm,
        global_agg=True,
        reward=None,
        comm_units=comm,
        metrics=metrics,
        loss_general=loss_ge,
        loss_class_aware=None,
        delta_s2=ds2,
        delta_pi2=dpi2,
    )
    sim.logs.append(entry)
    return entry


def run_experiment(config: RunConfig, method: str | None = None) -> Simulation:
    """Set up and run ``protocol.rounds`` rounds; ``method`` overrides the config."""
    if method is not None and method != config.method:
        config = config.with_overrides(method=method)
    sim = setup(config)
    step = run_baseline_round if config.method == "baseline" else run_round
    for _ in range(config.protocol.rounds):
        step(sim)
    return sim


def run_baseline(config: RunConfig) -> Simulation:
    return run_experiment(config, method="baseline")


def metrics_rows(sim: Simulation) -> list[dict]:
    return [entry.row() for entry in sim.logs]
