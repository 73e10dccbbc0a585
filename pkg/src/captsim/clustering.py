"""Client distance matrices and seeded k-means over their rows."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataspace import HeadMidTailSplit, Priors

log = logging.getLogger(__name__)

SIMILARITY_JS = "similarity_js"
COMPLEMENTARITY = "complementarity"


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    mode: str


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    mode: str = ""
    sse: float = 0.0
    sse_history: tuple = ()

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]

    def members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == j) for j in range(self.num_clusters)]


def _check_simplex(p: np.ndarray, name: str) -> None:
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} is not a probability vector")


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats; zero-mass terms contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch {p.shape} vs {q.shape}")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    total = p + q

    def kl_to_m(a: np.ndarray) -> float:
        # a * ln(a / m) with m = total / 2, written so subnormal inputs cannot underflow m
        nz = a > 0
        return float(np.sum(a[nz] * (np.log(2.0) + np.log(a[nz]) - np.log(total[nz]))))

    return 0.5 * kl_to_m(p) + 0.5 * kl_to_m(q)


def complementarity(d_i, d_j, ht: HeadMidTailSplit) -> float:
    d_i = np.asarray(d_i, dtype=np.float64)
    d_j = np.asarray(d_j, dtype=np.float64)
    if d_i.shape != d_j.shape:
        raise ValueError("length mismatch")
    _check_simplex(d_i, "d_i")
    _check_simplex(d_j, "d_j")
    classes = ht.head_or_tail
    if classes.size and (classes.min() < 0 or classes.max() >= d_i.size):
        raise ValueError("split refers to classes outside the distribution")
    return float(np.sum(d_i[classes] * (1.0 - d_j[classes])))


def build_matrices(priors: Priors, ht: HeadMidTailSplit) -> tuple[DistanceMatrix, DistanceMatrix]:
    dist = priors.per_client
    k = dist.shape[0]
    if k < 2:
        raise ValueError("need at least two clients")
    s = np.zeros((k, k))
    comp = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if j > i:
                s[i, j] = s[j, i] = js_divergence(dist[i], dist[j])
            comp[i, j] = complementarity(dist[i], dist[j], ht)
    return DistanceMatrix(s, SIMILARITY_JS), DistanceMatrix(comp, COMPLEMENTARITY)


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centre
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(x, x[[idx]])[:, 0])
    return x[chosen].copy()


def _repair_empty(x, labels, centroids):
    k = centroids.shape[0]
    for j in range(k):
        if np.any(labels == j):
            continue
        d2 = ((x - centroids[labels]) ** 2).sum(axis=1)
        sizes = np.bincount(labels, minlength=k)
        # never strip the last member from another cluster
        d2[sizes[labels] <= 1] = -1.0
        far = int(np.argmax(d2))
        labels[far] = j
        centroids[j] = x[far]
    return labels, centroids


def _lloyd(x, centroids, max_iter, tol):
    k = centroids.shape[0]
    history = []
    labels = _sq_dists(x, centroids).argmin(axis=1)
    for _ in range(max_iter):
        labels, centroids = _repair_empty(x, labels, centroids)
        new = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        history.append(float(((x - centroids[labels]) ** 2).sum()))
        new_labels = _sq_dists(x, centroids).argmin(axis=1)
        if shift < tol and np.array_equal(new_labels, labels):
            break
        labels = new_labels
    labels, centroids = _repair_empty(x, labels, centroids)
    labels, centroids = _hartigan(x, labels, k, history, max_iter)
    sse = float(((x - centroids[labels]) ** 2).sum())
    history.append(sse)
    return labels, centroids, sse, history


def _hartigan(x, labels, k, history, max_sweeps):
    """Single-point transfers that strictly lower the SSE, until none is left.

    Lloyd stops at partitions where some single move still helps because it
    ignores how the move shifts both centroids; this pass accounts for it.
    """
    labels = labels.copy()
    sizes = np.bincount(labels, minlength=k).astype(np.float64)
    centroids = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
    for _ in range(max_sweeps):
        moved = False
        for i in range(x.shape[0]):
            a = labels[i]
            if sizes[a] <= 1:
                continue
            d2 = ((centroids - x[i]) ** 2).sum(axis=1)
            gain_out = sizes[a] / (sizes[a] - 1) * d2[a]
            cost_in = sizes / (sizes + 1) * d2
            cost_in[a] = np.inf
            b = int(np.argmin(cost_in))
            if cost_in[b] < gain_out * (1 - 1e-12) - 1e-15:
                centroids[a] = (sizes[a] * centroids[a] - x[i]) / (sizes[a] - 1)
                centroids[b] = (sizes[b] * centroids[b] + x[i]) / (sizes[b] + 1)
                sizes[a] -= 1
                sizes[b] += 1
                labels[i] = b
                moved = True
        if not moved:
            break
        centroids = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        history.append(float(((x - centroids[labels]) ** 2).sum()))
    return labels, centroids


def kmeans(
    rows,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-10,
    n_init: int = 10,
    mode: str = "",
) -> ClusterAssignment:
    """Lloyd's algorithm from k-means++ seeds plus Hartigan single-point
    refinement, best of ``n_init`` restarts.

    Empty clusters are refilled with the point farthest from its centroid.
    Restarts share one generator built from ``seed``, so results are
    reproducible; among equal-SSE solutions the earliest restart wins.
    """
    x = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        labels, centroids, sse, history = _lloyd(x, _kmeans_pp(x, k, rng), max_iter, tol)
        if best is None or sse < best[2] - 1e-12:
            best = (labels, centroids, sse, history)
    labels, centroids, sse, history = best
    return ClusterAssignment(labels, centroids, mode, sse, tuple(history))


def assign_clusters(
    priors: Priors,
    ht: HeadMidTailSplit,
    k_sim: int = 3,
    k_het: int = 3,
    seed: int = 0,
) -> tuple[ClusterAssignment, ClusterAssignment]:
    """Similarity clusters (k-means on JS rows) and heterogeneity clusters
    (k-means on complementarity rows) for the given clients."""
    n = priors.per_client.shape[0]
    if n < 1:
        raise ValueError("no clients to cluster")
    if max(k_sim, k_het) > n:
        log.info("clamping cluster counts (%d, %d) to %d active clients", k_sim, k_het, n)
    k_sim, k_het = min(k_sim, n), min(k_het, n)
    if n == 1:
        zero = np.zeros(1, dtype=int)
        row = np.zeros((1, 1))
        return (
            ClusterAssignment(zero, row, SIMILARITY_JS),
            ClusterAssignment(zero.copy(), row.copy(), COMPLEMENTARITY),
        )
    s, comp = build_matrices(priors, ht)
    seeds = np.random.SeedSequence(seed).generate_state(2)
    sim = kmeans(s.values, k_sim, int(seeds[0]), mode=SIMILARITY_JS)
    het = kmeans(comp.values, k_het, int(seeds[1]), mode=COMPLEMENTARITY)
    return sim, het
