"""Approximate nearest-neighbour retrieval: k-means, IVF index and updates."""

from .ivf import (
    AttributeStore,
    Filter,
    IndexVersionError,
    IvfIndex,
    SearchResult,
    apply_update,
    brute_force_knn,
    build_ivf,
    ivf_search,
    load_index,
    save_index,
    top_k,
)
from .kmeans import DEFAULT_K, ClusterStats, KMeansModel, cluster_stats, kmeans_fit

__all__ = [
    "AttributeStore", "ClusterStats", "DEFAULT_K", "Filter", "IndexVersionError", "IvfIndex",
    "KMeansModel", "SearchResult", "apply_update", "brute_force_knn", "build_ivf",
    "cluster_stats", "ivf_search", "kmeans_fit", "load_index", "save_index", "top_k",
]
