"""Empirical checks of the gradient-variance theory and split accuracies.

All averages are exact finite averages over the data handed in, with every
client weighted ``1/K`` regardless of its size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataspace import EmptyClientError, HeadMidTailSplit, Partition, priors
from .objectives import per_sample_gradients, predict
from .toyclip import FrozenEncoders, PromptState

log = logging.getLogger(__name__)


@dataclass
class VarianceReport:
    total_variance: float
    within: np.ndarray
    within_mean: float
    between: float
    G_hat: float = float("nan")
    delta_pi2: float = float("nan")
    bound: float = float("nan")
    bound_holds: bool | None = None
    loose_bound: float = float("nan")
    loose_bound_holds: bool | None = None

    @property
    def identity_gap(self) -> float:
        """Relative gap ``|total - (within_mean + between)| / total`` (0 when total is 0)."""
        gap = abs(self.total_variance - (self.within_mean + self.between))
        return gap / self.total_variance if self.total_variance > 0 else gap


@dataclass
class SplitMetrics:
    overall: float
    head: float | None
    mid: float | None
    tail: float | None
    per_class: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {"overall": self.overall, "head": self.head, "mid": self.mid, "tail": self.tail}


def delta_pi_sq(partition: Partition) -> float:
    """Mean over clients of the squared L2 gap between client and global label priors."""
    pr = priors(partition)
    return float(np.mean(np.sum((pr.per_client - pr.global_) ** 2, axis=1)))


def _client_grads(clients, enc, state, prior, tau, lam) -> list[np.ndarray]:
    out = []
    for k, (z, y) in enumerate(clients):
        if len(y) == 0:
            raise EmptyClientError(f"client {k} holds no samples")
        out.append(per_sample_gradients(enc, state, z, y, prior, tau, lam))
    return out


def _decompose(grads: list[np.ndarray]) -> VarianceReport:
    means = np.stack([g.mean(axis=0) for g in grads])
    global_mean = means.mean(axis=0)
    within = np.array([np.mean(np.sum((g - m) ** 2, axis=1)) for g, m in zip(grads, means)])
    between = float(np.mean(np.sum((means - global_mean) ** 2, axis=1)))
    # client drawn uniformly, then a sample uniformly within it
    total = float(np.mean([np.mean(np.sum((g - global_mean) ** 2, axis=1)) for g in grads]))
    return VarianceReport(total, within, float(within.mean()), between)


def variance_decomposition(
    clients: Sequence[tuple[np.ndarray, np.ndarray]],
    enc: FrozenEncoders,
    state: PromptState,
    prior,
    tau: float,
    lam: float = 1.0,
) -> VarianceReport:
    """Split per-sample gradient variance into within- and between-client parts.

    ``clients`` is a sequence of ``(features, labels)`` pairs.
    """
    if not clients:
        raise ValueError("no clients")
    return _decompose(_client_grads(clients, enc, state, prior, tau, lam))


def bound_check(
    clients: Sequence[tuple[np.ndarray, np.ndarray]],
    enc: FrozenEncoders,
    state: PromptState,
    prior,
    tau: float,
    lam: float,
    partition: Partition,
) -> VarianceReport:
    """Compare the between-client variance with ``G^2 * C * delta_pi^2``.

    ``G`` is the largest norm of a per-class mean gradient, pooling every
    sample of that class across clients. The bound without the factor ``C``
    is reported as well but is not expected to hold in general.
    """
    grads = _client_grads(clients, enc, state, prior, tau, lam)
    report = _decompose(grads)
    all_grads = np.concatenate(grads)
    all_labels = np.concatenate([np.asarray(y, dtype=int) for _, y in clients])
    num_classes = partition.num_classes
    norms = []
    for c in range(num_classes):
        sel = all_labels == c
        if not np.any(sel):
            log.info("class %d has no samples; excluded from G_hat", c)
            continue
        norms.append(float(np.linalg.norm(all_grads[sel].mean(axis=0))))
    g_hat = max(norms) if norms else 0.0
    dpi = delta_pi_sq(partition)
    report.G_hat = g_hat
    report.delta_pi2 = dpi
    report.bound = g_hat**2 * num_classes * dpi
    report.bound_holds = bool(report.between <= report.bound * (1 + 1e-12) + 1e-15)
    report.loose_bound = g_hat**2 * dpi
    report.loose_bound_holds = bool(report.between <= report.loose_bound * (1 + 1e-12) + 1e-15)
    if not report.loose_bound_holds:
        log.info("C-free bound exceeded: between=%.3e > %.3e", report.between, report.loose_bound)
    return report


def balanced_accuracies(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    correct = np.bincount(labels, weights=(pred == labels).astype(float), minlength=num_classes)
    totals = np.bincount(labels, minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return correct / totals


def split_metrics(per_class: np.ndarray, split: HeadMidTailSplit) -> SplitMetrics:
    def group(ids) -> float | None:
        vals = per_class[sorted(ids)] if ids else np.array([])
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else None

    seen = per_class[np.isfinite(per_class)]
    return SplitMetrics(
        overall=float(seen.mean()),
        head=group(split.head),
        mid=group(split.mid),
        tail=group(split.tail),
        per_class=per_class,
    )


def evaluate_split(
    enc: FrozenEncoders,
    state: PromptState,
    features: np.ndarray,
    labels,
    split: HeadMidTailSplit,
    mode: str = "integrated",
) -> SplitMetrics:
    """Argmax accuracy per class, then averaged over head, mid and tail classes.

    Splits with no classes are reported as ``None``.
    """
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("empty test set")
    pred = predict(enc, state, features, mode).argmax(axis=1)
    return split_metrics(balanced_accuracies(pred, labels, enc.num_classes), split)
