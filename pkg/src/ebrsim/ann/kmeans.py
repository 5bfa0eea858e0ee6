"""k-means over embedding tables, for both similarity metrics.

Euclidean k-means is the textbook algorithm. For dot-product similarity the
assignment step picks the centroid with the largest inner product and the
update step keeps the plain mean; long vectors then make long centroids
that win most assignments, which is the cluster-size pathology this package
measures. ``augmented=True`` applies the standard max-inner-product to
nearest-neighbour reduction, appending ``sqrt(M^2 - |x|^2)`` to every vector
and clustering the result with Euclidean k-means.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..domain import InputDomainError
from ..twotower.network import Similarity

log = logging.getLogger(__name__)

DEFAULT_K = 128


@dataclass(eq=False)
class KMeansModel:
    centroids: np.ndarray  # [k, d], or [k, d + 1] when augmented
    metric: Similarity
    iterations: int
    seed: int
    sizes: np.ndarray
    augmented: bool = False
    max_norm: float = 0.0
    table_version: str = ""
    inertia: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def _lift(self, x: np.ndarray) -> np.ndarray:
        if not self.augmented:
            return x
        sq = np.maximum(self.max_norm ** 2 - (x * x).sum(axis=-1, keepdims=True), 0.0)
        return np.concatenate([x, np.sqrt(sq)], axis=-1)

    def assign(self, vectors: np.ndarray) -> np.ndarray:
        """Cluster of every row; ties go to the lowest cluster index."""
        return _assign(self._lift(np.asarray(vectors, dtype=np.float64)), self.centroids,
                       Similarity.EUCLIDEAN if self.augmented else self.metric)

    def rank_centroids(self, q: np.ndarray) -> np.ndarray:
        """Cluster indices from closest to farthest from a query embedding."""
        q = np.asarray(q, dtype=np.float64)
        if self.augmented:
            q = np.concatenate([q, [0.0]])
            metric = Similarity.EUCLIDEAN
        else:
            metric = self.metric
        if metric is Similarity.DOT:
            s = (self.centroids * q).sum(axis=1)
        else:
            diff = self.centroids - q
            s = -(diff * diff).sum(axis=1)
        return np.lexsort((np.arange(self.k), -s))


def _assign(x: np.ndarray, c: np.ndarray, metric: Similarity) -> np.ndarray:
    if metric is Similarity.DOT:
        return np.argmax(x @ c.T, axis=1)
    d = (c * c).sum(axis=1)[None, :] - 2.0 * (x @ c.T)
    return np.argmin(d, axis=1)


def _sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x - c
    return (diff * diff).sum(axis=1)


def _plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dist(x, x[chosen[0]])
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(1, k):
        total = d2.sum()
        if total > 0.0:
            i = int(rng.choice(n, p=d2 / total))
        else:
            # Every remaining point duplicates a centroid; any untaken one will do.
            i = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(i)
        taken[i] = True
        d2 = np.minimum(d2, _sq_dist(x, x[i]))
    return x[np.array(chosen)].copy()


def kmeans_fit(table, k: int = DEFAULT_K, metric: Similarity | str | None = None,
               iters: int = 25, seed: int = 0, augmented: bool = False) -> KMeansModel:
    """Lloyd iterations from k-means++ seeding.

    ``table`` is an embedding table or a plain [n, d] array. The metric
    defaults to the table's similarity.
    """
    if hasattr(table, "vectors"):
        x = np.asarray(table.vectors, dtype=np.float64)
        version = table.version
        metric = table.similarity if metric is None else metric
    else:
        x = np.asarray(table, dtype=np.float64)
        version = ""
        metric = Similarity.EUCLIDEAN if metric is None else metric
    metric = Similarity(metric)
    n = x.shape[0]
    if k < 1 or n < k:
        raise InputDomainError(f"need 1 <= k <= corpus size, got k={k}, n={n}")
    if not np.all(np.isfinite(x)):
        raise InputDomainError("embeddings must be finite")
    if augmented and metric is not Similarity.DOT:
        raise InputDomainError("the augmented transform only applies to dot-product clustering")

    max_norm = float(np.sqrt((x * x).sum(axis=1).max())) if augmented else 0.0
    model = KMeansModel(np.zeros((k, x.shape[1] + int(augmented))), metric, 0, seed,
                        np.zeros(k, dtype=np.int64), augmented, max_norm, version)
    xw = model._lift(x)
    work_metric = Similarity.EUCLIDEAN if augmented else metric
    rng = np.random.default_rng(seed)
    c = _plus_plus(xw, k, rng)
    labels = _assign(xw, c, work_metric)
    inertia = [float(_sq_dist(xw, c[labels]).sum())]
    it = 0
    for it in range(1, iters + 1):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, labels, xw)
        live = counts > 0
        c = c.copy()
        c[live] = sums[live] / counts[live, None]
        empty = np.flatnonzero(~live)
        if empty.size:
            # Re-seed each empty cluster at the farthest point of a cluster that can spare one.
            far = np.argsort(-_sq_dist(xw, c[labels]), kind="stable")
            spare = counts.copy()
            j = 0
            for e in empty:
                while spare[labels[far[j]]] < 2:
                    j += 1
                p = far[j]
                spare[labels[p]] -= 1
                c[e] = xw[p]
                labels[p] = e
                j += 1
        new = _assign(xw, c, work_metric)
        inertia.append(float(_sq_dist(xw, c[new]).sum()))
        changed = int((new != labels).sum())
        labels = new
        log.debug("kmeans iter %d inertia %.6g changed %d", it, inertia[-1], changed)
        if changed == 0 and not empty.size:
            break
    model.centroids = c
    model.iterations = it
    model.sizes = np.bincount(labels, minlength=k)
    model.inertia = inertia
    return model


@dataclass(frozen=True)
class ClusterStats:
    sizes: np.ndarray
    max_share: float
    entropy: float  # normalized to [0, 1]

    @property
    def k(self) -> int:
        return self.sizes.shape[0]


def cluster_stats(model_or_sizes) -> ClusterStats:
    sizes = np.asarray(getattr(model_or_sizes, "sizes", model_or_sizes), dtype=np.int64)
    total = int(sizes.sum())
    if total <= 0:
        raise InputDomainError("no points assigned")
    p = sizes[sizes > 0] / total
    k = sizes.shape[0]
    h = float(-(p * np.log(p)).sum())
    entropy = h / math.log(k) if k > 1 else 1.0
    return ClusterStats(sizes.copy(), float(sizes.max() / total), min(max(entropy, 0.0), 1.0))
