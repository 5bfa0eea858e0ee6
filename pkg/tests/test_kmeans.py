import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ebrsim.ann import cluster_stats, kmeans_fit
from ebrsim.domain import InputDomainError
from ebrsim.evalharness import corpus_sweep


def blobs(rng, n=400, d=8, sep=20.0):
    centers = np.zeros((2, d))
    centers[1, 0] = sep
    labels = rng.integers(2, size=n)
    return centers[labels] + rng.normal(size=(n, d)), labels, centers


def test_two_blobs_recovered(rng):
    x, labels, _ = blobs(rng)
    km = kmeans_fit(x, 2, "euclidean", seed=3)
    got = km.assign(x)
    agree = max(np.mean(got == labels), np.mean(got != labels))
    assert agree >= 0.99


def test_k_equals_n_has_zero_inertia(rng):
    x = rng.normal(size=(30, 4))
    km = kmeans_fit(x, 30, "euclidean", seed=0)
    assert km.inertia[-1] == 0.0
    assert sorted(km.sizes.tolist()) == [1] * 30


@given(st.integers(0, 10_000), st.integers(2, 12))
def test_euclidean_inertia_nonincreasing(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(120, 3)) * rng.uniform(0.1, 5.0, size=(120, 1))
    km = kmeans_fit(x, k, "euclidean", iters=15, seed=seed)
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(km.inertia, km.inertia[1:]))
    assert km.sizes.sum() == 120 and np.isfinite(km.centroids).all()


def test_no_empty_clusters_on_duplicates():
    x = np.repeat(np.eye(3), [20, 1, 1], axis=0)
    km = kmeans_fit(x, 3, "euclidean", seed=0)
    assert km.sizes.sum() == 22


def test_corpus_smaller_than_k_rejected(rng):
    with pytest.raises(InputDomainError):
        kmeans_fit(rng.normal(size=(5, 2)), 6)
    with pytest.raises(InputDomainError):
        kmeans_fit(rng.normal(size=(5, 2)), 2, "euclidean", augmented=True)


def test_deterministic(table):
    a = kmeans_fit(table, 16, seed=4)
    b = kmeans_fit(table, 16, seed=4)
    assert np.array_equal(a.centroids, b.centroids) and np.array_equal(a.sizes, b.sizes)


def test_cluster_stats_edges():
    bal = cluster_stats(np.full(8, 5))
    assert bal.max_share == pytest.approx(1 / 8) and bal.entropy == pytest.approx(1.0)
    one = cluster_stats(np.array([40, 0, 0, 0]))
    assert one.max_share == 1.0 and one.entropy == 0.0
    with pytest.raises(InputDomainError):
        cluster_stats(np.zeros(3, dtype=int))


@given(st.lists(st.integers(0, 50), min_size=2, max_size=20).filter(lambda s: sum(s) > 0))
def test_cluster_stats_ranges(sizes):
    s = cluster_stats(np.array(sizes))
    assert 0.0 <= s.entropy <= 1.0
    assert max(sizes) / sum(sizes) == s.max_share
    p = [c / sum(sizes) for c in sizes if c]
    assert s.entropy == pytest.approx(-math.fsum(x * math.log(x) for x in p) / math.log(len(sizes)))


def test_augmented_mode_runs(table):
    from ebrsim.twotower import EmbeddingTable, Similarity
    t = EmbeddingTable(table.ids, table.vectors, Similarity.DOT, "m", 0)
    km = kmeans_fit(t, 8, augmented=True, seed=1)
    assert km.centroids.shape == (8, table.dim + 1)
    assert km.assign(t.vectors).shape == (len(t),)


def test_dot_clusters_more_skewed_on_count_scaled_corpus(world):
    sw = corpus_sweep(world, k=16, iters=10, nprobes_list=(2, 4), num_queries=20)
    dot, euc = sw.stats("dot"), sw.stats("euclidean")
    assert euc.entropy > dot.entropy
    assert dot.max_share > euc.max_share
