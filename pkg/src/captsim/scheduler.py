"""Bandit controller for local-iteration count and global-aggregation period."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np


@dataclass(frozen=True)
class Arm:
    intra_iters: int
    global_period: int

    def __post_init__(self) -> None:
        if self.intra_iters < 1 or self.global_period < 1:
            raise ValueError(f"arm values must be >= 1, got {self}")


DEFAULT_ARMS = tuple(Arm(e, p) for e, p in product((1, 2), (1, 2, 5)))


@dataclass
class BanditState:
    """Value estimates and pull counts for a fixed list of arms.

    ``score_rule`` picks the exploitation term of the selection score:
    ``"mean"`` uses ``V(a)`` directly, ``"ratio"`` uses ``V(a) / (N(a) + eps)``.
    Both share the bonus ``c * sqrt(ln(sum N) / (N(a) + eps))``.
    """

    arms: tuple
    eta0: float = 1.0
    epsilon_stab: float = 1e-6
    explore_coeff: float = 1.0
    explore_rate: float = 0.1
    score_rule: str = "mean"
    seed: int = 0
    values: np.ndarray = field(default=None)
    counts: np.ndarray = field(default=None)
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.arms = tuple(self.arms)
        if not self.arms:
            raise ValueError("need at least one arm")
        if self.score_rule not in ("mean", "ratio"):
            raise ValueError(f"unknown score_rule {self.score_rule!r}")
        if self.values is None:
            self.values = np.zeros(len(self.arms))
        if self.counts is None:
            self.counts = np.zeros(len(self.arms), dtype=np.int64)
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @property
    def total_pulls(self) -> int:
        return int(self.counts.sum())

    def index(self, arm: Arm) -> int:
        try:
            return self.arms.index(arm)
        except ValueError:
            raise KeyError(f"unknown arm {arm}") from None

    def scores(self) -> np.ndarray:
        n = self.counts + self.epsilon_stab
        total = self.total_pulls
        log_total = math.log(total) if total > 0 else 0.0
        exploit = self.values if self.score_rule == "mean" else self.values / n
        return exploit + self.explore_coeff * np.sqrt(log_total / n)


def mab_update(state: BanditState, arm: Arm, reward: float) -> BanditState:
    """Move ``V(arm)`` toward ``reward`` with step ``eta0 / (1 + N(arm))``."""
    if not math.isfinite(reward):
        raise ValueError(f"reward must be finite, got {reward}")
    i = state.index(arm)
    eta = state.eta0 / (1.0 + state.counts[i])
    state.values[i] += eta * (reward - state.values[i])
    state.counts[i] += 1
    return state


def mab_select(state: BanditState) -> Arm:
    if len(state.arms) == 1:
        return state.arms[0]
    # the coin is drawn every call so the stream position does not depend on outcomes
    coin = state.rng.random()
    pick = int(state.rng.integers(len(state.arms)))
    if coin < state.explore_rate:
        return state.arms[pick]
    # np.argmax returns the first maximum, i.e. the lowest arm index on ties
    return state.arms[int(np.argmax(state.scores()))]


def compute_reward(prev_balanced_acc: float, new_balanced_acc: float, comm_units: float) -> float:
    r = (new_balanced_acc - prev_balanced_acc) / (1.0 + comm_units)
    return float(min(1.0, max(-1.0, r)))


def should_global_aggregate(round_: int, last_global_round: int, arm: Arm) -> bool:
    if round_ < last_global_round:
        raise ValueError("round precedes the last global aggregation")
    return round_ - last_global_round >= arm.global_period
