"""Long-tailed class counts, Dirichlet client partitions and label priors.

Everything here is a pure function of its arguments. Randomness is drawn
from a generator built from the ``seed`` argument, never from global state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class InvalidSpecError(ValueError):
    """Raised for an impossible long-tail or partition request."""


class EmptyClientError(ValueError):
    """Raised when a client without samples is used where data is required."""


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    n_max: int
    imbalance_ratio: float

    def validate(self) -> None:
        if self.num_classes < 1:
            raise InvalidSpecError(f"num_classes must be >= 1, got {self.num_classes}")
        if not math.isfinite(self.imbalance_ratio) or self.imbalance_ratio < 1:
            raise InvalidSpecError(f"imbalance_ratio must be >= 1, got {self.imbalance_ratio}")
        if self.num_classes == 1 and self.imbalance_ratio > 1:
            raise InvalidSpecError("a single class cannot have imbalance_ratio > 1")
        if self.n_max < 1 or self.n_max < self.imbalance_ratio:
            raise InvalidSpecError(
                f"n_max={self.n_max} leaves the rarest class empty at ratio {self.imbalance_ratio}"
            )

    @property
    def decay_rate(self) -> float:
        if self.num_classes == 1:
            return 0.0
        return math.log(self.imbalance_ratio) / (self.num_classes - 1)


@dataclass(frozen=True)
class Partition:
    """Per-client by per-class integer sample counts."""

    matrix: np.ndarray  # (K, C) int64

    @property
    def num_clients(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[1]

    @property
    def client_sizes(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    @property
    def class_counts(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    def subset(self, client_ids) -> "Partition":
        return Partition(self.matrix[np.asarray(client_ids, dtype=int)])


@dataclass(frozen=True)
class Priors:
    global_: np.ndarray  # (C,)
    per_client: np.ndarray  # (K, C)


@dataclass(frozen=True)
class HeadMidTailSplit:
    head: frozenset
    mid: frozenset
    tail: frozenset

    def groups(self) -> dict[str, frozenset]:
        return {"head": self.head, "mid": self.mid, "tail": self.tail}

    @property
    def head_or_tail(self) -> np.ndarray:
        return np.array(sorted(self.head | self.tail), dtype=int)


def longtail_counts(spec: LongTailSpec) -> np.ndarray:
    """Exponentially decaying class counts.

    Class ``c`` (0-based) receives ``round(n_max * exp(-decay * c))`` samples
    with ``decay = ln(rho) / (C - 1)``, so the first class holds ``n_max`` and
    the last holds ``n_max / rho`` up to rounding.

    >>> longtail_counts(LongTailSpec(10, 5000, 100.0))[[0, 1, 9]].tolist()
    [5000, 2997, 50]
    """
    spec.validate()
    idx = np.arange(spec.num_classes, dtype=np.float64)
    raw = spec.n_max * np.exp(-spec.decay_rate * idx)
    counts = np.floor(raw + 0.5).astype(np.int64)
    counts[0] = spec.n_max
    return counts


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    scaled = total * proportions
    base = np.floor(scaled).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        # stable sort keeps lower client ids first among equal remainders
        order = np.argsort(-(scaled - base), kind="stable")
        base[order[:short]] += 1
    return base


def _dirichlet(rng: np.random.Generator, alpha: float, k: int) -> np.ndarray:
    p = rng.dirichlet(np.full(k, alpha))
    if not np.all(np.isfinite(p)) or p.sum() <= 0:
        # tiny concentrations can underflow every gamma draw; fall back to a point mass
        p = np.zeros(k)
        p[rng.integers(k)] = 1.0
    return p / p.sum()


def dirichlet_partition(
    counts,
    num_clients: int,
    alpha_dir: float,
    seed: int,
    min_client_size: int = 0,
    max_tries: int = 1000,
) -> Partition:
    """Split every class across clients with symmetric Dirichlet proportions.

    Each class draws its own proportion vector over clients and its ``n_c``
    samples are allocated by largest-remainder rounding, so column sums are
    exact. With ``min_client_size > 0`` the whole draw is repeated from the
    same generator until every client holds at least that many samples.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if num_clients < 1:
        raise InvalidSpecError(f"num_clients must be >= 1, got {num_clients}")
    if not math.isfinite(alpha_dir) or alpha_dir <= 0:
        raise InvalidSpecError(f"alpha_dir must be a positive finite number, got {alpha_dir}")
    if counts.ndim != 1 or np.any(counts < 0):
        raise InvalidSpecError("counts must be a vector of non-negative integers")
    if min_client_size * num_clients > counts.sum():
        raise InvalidSpecError("not enough samples to give every client min_client_size")

    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        matrix = np.zeros((num_clients, counts.size), dtype=np.int64)
        for c, n_c in enumerate(counts):
            matrix[:, c] = _largest_remainder(int(n_c), _dirichlet(rng, alpha_dir, num_clients))
        if matrix.sum(axis=1).min() >= min_client_size:
            return Partition(matrix)
    raise InvalidSpecError(
        f"no partition with min_client_size={min_client_size} after {max_tries} draws"
    )


def priors(partition: Partition) -> Priors:
    m = partition.matrix.astype(np.float64)
    sizes = m.sum(axis=1)
    if np.any(sizes == 0):
        empty = np.flatnonzero(sizes == 0).tolist()
        raise EmptyClientError(f"clients {empty} hold no samples")
    total = m.sum()
    return Priors(global_=m.sum(axis=0) / total, per_client=m / sizes[:, None])


def normalize_counts(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise EmptyClientError("counts sum to zero")
    return counts / total


def head_mid_tail(counts, head_mass: float = 0.75, mid_mass: float = 0.95) -> HeadMidTailSplit:
    """Split classes by cumulative sample mass over count-sorted classes.

    Head is the shortest prefix (largest classes first, lower id on ties)
    reaching ``head_mass`` of all samples, mid the next shortest run
    reaching ``mid_mass``; the rest is tail and may be empty.
    """
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total <= 0:
        raise InvalidSpecError("head_mid_tail needs at least one sample")
    order = np.argsort(-counts, kind="stable")
    cum = np.cumsum(counts[order])
    # exact rational thresholds so a prefix hitting 95% exactly counts as reaching it
    head_thr = math.ceil(Fraction(str(head_mass)) * total)
    mid_thr = math.ceil(Fraction(str(mid_mass)) * total)
    n_head = int(np.searchsorted(cum, head_thr, side="left")) + 1
    n_mid_end = max(n_head, int(np.searchsorted(cum, mid_thr, side="left")) + 1)
    n_head = min(n_head, counts.size)
    n_mid_end = min(n_mid_end, counts.size)
    return HeadMidTailSplit(
        head=frozenset(order[:n_head].tolist()),
        mid=frozenset(order[n_head:n_mid_end].tolist()),
        tail=frozenset(order[n_mid_end:].tolist()),
    )
