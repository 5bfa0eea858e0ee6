"""Sharded scatter-gather search with a three-stage ranking cascade.

A root fans every query out to leaf shards. A leaf owns a hash slice of the
corpus: its embeddings, an IVF index over them and the calendar rows of its
listings. All leaves share one set of k-means centroids, so a query probes
the same clusters everywhere and the union of the leaf scans is exactly the
scan a single machine would do.

The cascade keeps the top ``K`` by embedding score, then the top ``N`` by the
first-stage score, refreshes availability and prices, and returns the top
``T``. Cutting each stage per leaf would make the output depend on the shard
count, so the root runs one threshold exchange per stage: leaves report
their local best candidates, the root fixes the global cut and leaves keep
only what survives it. The result is identical for any number of leaves.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ann.ivf import (
    AttributeStore,
    Filter,
    IvfIndex,
    build_ivf,
    ivf_search,
    top_k,
)
from .ann.kmeans import KMeansModel
from .domain import InputDomainError, ListingId, Query, query_from_record, query_to_record
from .flexdate import CalendarStore, DateCombo, ListingUpdate
from .twotower.network import Similarity
from .twotower.training import EmbeddingTable, embed_queries
from .worldgen import World, relevance_terms

log = logging.getLogger(__name__)

QueryEncoder = Callable[[Sequence[Query]], np.ndarray]
StageHook = Callable[[str], None]


class ConfigurationError(RuntimeError):
    """The serving stack is missing a component it needs."""


@dataclass(frozen=True)
class CascadeConfig:
    """Stage caps: ``K`` per leaf retrieval, ``N`` after first stage, ``T`` returned.

    Caps must be nonincreasing. ``K = N = T`` is allowed and degenerates the
    cascade to a single stage.
    """

    K: int = 400
    N: int = 100
    T: int = 20
    num_leaves: int = 4
    nprobes: int = 16
    similarity: Similarity = Similarity.EUCLIDEAN

    def __post_init__(self) -> None:
        if self.T < 1:
            raise InputDomainError("T must be at least 1")
        if not self.K >= self.N >= self.T:
            raise InputDomainError(f"need K >= N >= T, got {self.K}, {self.N}, {self.T}")
        if self.num_leaves < 1:
            raise InputDomainError("num_leaves must be positive")
        if self.nprobes < 1:
            raise InputDomainError("nprobes must be positive")
        object.__setattr__(self, "similarity", Similarity(self.similarity))

    def to_dict(self) -> dict:
        return {"K": self.K, "N": self.N, "T": self.T, "num_leaves": self.num_leaves,
                "nprobes": self.nprobes, "similarity": self.similarity.value}

    @classmethod
    def from_dict(cls, d: dict) -> CascadeConfig:
        return cls(**d)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def shard_of(listing_ids, num_leaves: int) -> np.ndarray:
    """Leaf owning each listing: a 64-bit mix of the id, modulo the leaf count."""
    if num_leaves < 1:
        raise InputDomainError("num_leaves must be positive")
    with np.errstate(over="ignore"):
        h = _splitmix64(np.asarray(listing_ids, dtype=np.int64).view(np.uint64))
    return (h % np.uint64(num_leaves)).astype(np.int64)


@dataclass(eq=False)
class LeafShard:
    shard_id: int
    ids: np.ndarray
    rows: np.ndarray  # positions of the shard's listings in the world
    index: IvfIndex
    fail: bool = False  # fault injection for tests

    @property
    def calendar(self) -> CalendarStore:
        return self.index.attributes.calendar

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass(eq=False)
class ServingCluster:
    world: World
    table: EmbeddingTable
    kmeans: KMeansModel
    leaves: tuple[LeafShard, ...]
    encoder: QueryEncoder | None = None

    @property
    def num_leaves(self) -> int:
        return len(self.leaves)

    def leaf_of(self, listing_id: ListingId) -> LeafShard:
        return self.leaves[int(shard_of([listing_id], self.num_leaves)[0])]

    def apply_update(self, update: ListingUpdate) -> int:
        """Route a calendar update to the leaf that owns the listing."""
        return self.leaf_of(update.listing_id).calendar.apply(update)

    def encode(self, queries: Sequence[Query]) -> np.ndarray:
        if self.encoder is None:
            raise ConfigurationError("no query encoder configured")
        return np.asarray(self.encoder(list(queries)), dtype=np.float64)


def model_encoder(model, world: World) -> QueryEncoder:
    """Query-tower encoder for a trained two-tower model."""
    return lambda queries: embed_queries(model, queries, world)


def build_cluster(world: World, table: EmbeddingTable | None, kmeans: KMeansModel,
                  num_leaves: int, encoder: QueryEncoder | None = None,
                  calendar: CalendarStore | None = None) -> ServingCluster:
    """Split the corpus over leaves; each leaf indexes its slice with the shared centroids.

    Leaf calendars start from ``calendar``'s current state when given, else
    from the world's generated calendar.
    """
    if table is None:
        raise ConfigurationError("an embedding table is required to build leaves")
    if not np.array_equal(table.ids, world.ids):
        raise ConfigurationError("embedding table rows must follow the world's listings")
    if calendar is not None:
        available, prices = calendar.dense()
    else:
        available, prices = world.calendar_available, world.calendar_prices
    owner = shard_of(world.ids, num_leaves)
    leaves = []
    for s in range(num_leaves):
        rows = np.flatnonzero(owner == s)
        ids = world.ids[rows]
        sub = EmbeddingTable(ids.copy(), table.vectors[rows].copy(), table.similarity,
                             table.model_version, table.tick)
        cal = CalendarStore(ids, available[rows], prices[rows])
        attrs = AttributeStore(ids, world.lat_lon[rows], world.cell_indices[rows],
                               world.capacity[rows], world.amenities[rows], cal)
        leaves.append(LeafShard(s, ids, rows, build_ivf(sub, kmeans, attrs)))
    return ServingCluster(world, table, kmeans, tuple(leaves), encoder)


# -- scoring -----------------------------------------------------------------------------


def first_stage_score(world: World, query: Query, listing_ids) -> np.ndarray:
    """Heavyweight ranker score: the world's ground-truth relevance."""
    return relevance_terms(world, query, world.index_of(listing_ids))


def setwise_rerank(ids: np.ndarray, scores: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Final stage slot; keeps the first-stage order and truncates to ``T``."""
    return ids[:T], scores[:T]


# -- leaf and root -----------------------------------------------------------------------


@dataclass(frozen=True)
class Candidates:
    ids: np.ndarray
    scores: np.ndarray

    @classmethod
    def empty(cls) -> Candidates:
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))

    def __len__(self) -> int:
        return self.ids.shape[0]

    def best(self, k: int) -> Candidates:
        pick = top_k(self.ids, self.scores, k)
        return Candidates(self.ids[pick], self.scores[pick])

    def restrict(self, keep: np.ndarray) -> Candidates:
        m = np.isin(self.ids, keep)
        return Candidates(self.ids[m], self.scores[m])

    @classmethod
    def concat(cls, parts: Sequence[Candidates]) -> Candidates:
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.ids for p in parts]),
                   np.concatenate([p.scores for p in parts]))


def _check_leaf(shard: LeafShard) -> None:
    if shard.fail:
        raise RuntimeError(f"leaf {shard.shard_id} unavailable")


def leaf_retrieve(shard: LeafShard, q_emb: np.ndarray, flt: Filter, cascade: CascadeConfig
                  ) -> Candidates:
    """Stage 1 on one leaf: filtered IVF search capped at ``K``."""
    _check_leaf(shard)
    nprobes = min(cascade.nprobes, shard.index.k)
    res = ivf_search(shard.index, q_emb, nprobes, flt, top_k=cascade.K)
    return Candidates(res.ids, res.scores)


def leaf_first_stage(shard: LeafShard, world: World, query: Query, cand: Candidates,
                     cap: int) -> Candidates:
    """Stage 2 on one leaf: first-stage scores of retrieved listings, best ``cap`` kept."""
    _check_leaf(shard)
    if len(cand) == 0:
        return Candidates.empty()
    return Candidates(cand.ids, first_stage_score(world, query, cand.ids)).best(cap)


def leaf_refresh(shard: LeafShard, flt: Filter, cand: Candidates) -> tuple[Candidates, int]:
    """Re-check calendar-dependent filters on the latest acknowledged state."""
    _check_leaf(shard)
    snap = shard.index.attributes.snapshot()
    if len(cand) == 0 or not flt.needs_calendar:
        return cand, snap.seq
    rows = shard.index.table.rows_of(cand.ids)
    keep = shard.index.attributes.mask(rows, flt, snap)
    return Candidates(cand.ids[keep], cand.scores[keep]), snap.seq


def leaf_search(shard: LeafShard, world: World, query: Query, q_emb: np.ndarray,
                cascade: CascadeConfig, flt: Filter | None = None) -> Candidates:
    """The whole cascade on one leaf in isolation, returning its top ``N``."""
    flt = flt if flt is not None else Filter.for_query(query)
    retrieved = leaf_retrieve(shard, q_emb, flt, cascade)
    ranked = leaf_first_stage(shard, world, query, retrieved, cascade.N)
    return leaf_refresh(shard, flt, ranked)[0]


@dataclass(frozen=True)
class CascadeResult:
    ids: np.ndarray
    scores: np.ndarray  # first-stage scores, best first
    retrieved: np.ndarray  # union of leaf stage-1 outputs (after the global K cut)
    first_stage: np.ndarray  # union of leaf stage-2 outputs (after the global N cut)
    responded: tuple[int, ...]
    failed: tuple[int, ...] = ()
    refresh_seqs: dict[int, int] = field(default_factory=dict)

    @property
    def degraded(self) -> bool:
        return bool(self.failed)

    def to_record(self, query_id: int | None = None) -> dict:
        rec = {"type": "search_result", "ids": [int(x) for x in self.ids],
               "scores": [float(x) for x in self.scores], "degraded": self.degraded,
               "responded": list(self.responded), "failed": list(self.failed)}
        if query_id is not None:
            rec["query_id"] = query_id
        return rec


def _fan_out(pool: ThreadPoolExecutor | None, leaves: Sequence[LeafShard], fn, failed: set
             ) -> dict[int, object]:
    """Run ``fn(leaf)`` on every live leaf; a raising leaf is marked failed, not fatal."""
    live = [s for s in leaves if s.shard_id not in failed]
    if pool is None:
        futures = None
    else:
        futures = {s.shard_id: pool.submit(fn, s) for s in live}
    out: dict[int, object] = {}
    for s in live:
        try:
            out[s.shard_id] = futures[s.shard_id].result() if futures else fn(s)
        except Exception as e:  # noqa: BLE001 - a leaf failure degrades the query
            log.warning("leaf %d failed: %s", s.shard_id, e)
            failed.add(s.shard_id)
    return out


def root_search(cluster: ServingCluster, query: Query, cascade: CascadeConfig,
                q_emb: np.ndarray | None = None, flt: Filter | None = None,
                on_stage: StageHook | None = None, parallel: bool = True) -> CascadeResult:
    """Scatter-gather the cascade over every leaf and merge by first-stage score.

    ``on_stage`` is called with ``"retrieval"`` and ``"first_stage"`` after those
    stages complete; tests use it to inject calendar updates mid-flight.
    """
    if q_emb is None:
        q_emb = cluster.encode([query])[0]
    flt = flt if flt is not None else Filter.for_query(query)
    failed: set[int] = set()
    leaves = cluster.leaves
    pool = ThreadPoolExecutor(max_workers=len(leaves)) if parallel and len(leaves) > 1 else None
    try:
        got = _fan_out(pool, leaves, lambda s: leaf_retrieve(s, q_emb, flt, cascade), failed)
        k_cut = Candidates.concat(list(got.values())).best(cascade.K)
        retrieved = {sid: c.restrict(k_cut.ids) for sid, c in got.items()}
        if on_stage:
            on_stage("retrieval")

        got = _fan_out(pool, leaves, lambda s: leaf_first_stage(
            s, cluster.world, query, retrieved[s.shard_id], cascade.N), failed)
        n_cut = Candidates.concat(list(got.values())).best(cascade.N)
        ranked = {sid: c.restrict(n_cut.ids) for sid, c in got.items()}
        if on_stage:
            on_stage("first_stage")

        got = _fan_out(pool, leaves, lambda s: leaf_refresh(s, flt, ranked[s.shard_id]),
                       failed)
    finally:
        if pool is not None:
            pool.shutdown()
    fresh = Candidates.concat([c for c, _ in got.values()])
    merged = fresh.best(len(fresh))
    ids, scores = setwise_rerank(merged.ids, merged.scores, cascade.T)
    responded = tuple(s.shard_id for s in leaves if s.shard_id not in failed)
    return CascadeResult(
        ids=ids, scores=scores,
        retrieved=np.sort(np.concatenate([retrieved[s].ids for s in responded]))
        if responded else np.zeros(0, dtype=np.int64),
        first_stage=np.sort(np.concatenate([ranked[s].ids for s in responded]))
        if responded else np.zeros(0, dtype=np.int64),
        responded=responded, failed=tuple(sorted(failed)),
        refresh_seqs={sid: seq for sid, (_, seq) in got.items()})


# -- batch retrieval ---------------------------------------------------------------------


@dataclass(frozen=True)
class BatchRetrievalRequest:
    """Offline similar-listing or query request.

    ``radius`` is a grid distance around the anchor's location (or the query's
    viewport center); ``price_band`` is nightly cents.
    """

    anchor_id: ListingId | None = None
    query: Query | None = None
    radius: float | None = None
    price_band: tuple[int, int] | None = None
    date_window: DateCombo | None = None
    flex_days: int = 0
    result_cap: int = 50
    request_id: int = 0

    def __post_init__(self) -> None:
        if self.anchor_id is None and self.query is None:
            raise InputDomainError("a batch request needs an anchor listing or a query")
        if self.result_cap < 1:
            raise InputDomainError("result_cap must be positive")
        if self.radius is not None and self.radius < 0:
            raise InputDomainError("radius must be nonnegative")

    def to_record(self) -> dict:
        return {
            "type": "batch_request", "request_id": self.request_id,
            "anchor_id": self.anchor_id,
            "query": query_to_record(self.query) if self.query is not None else None,
            "radius": self.radius,
            "price_band": list(self.price_band) if self.price_band else None,
            "date_window": [self.date_window.checkin, self.date_window.nights]
            if self.date_window else None,
            "flex_days": self.flex_days, "result_cap": self.result_cap,
        }

    @classmethod
    def from_record(cls, rec: dict) -> BatchRetrievalRequest:
        if rec.get("type") != "batch_request":
            raise InputDomainError(f"expected a batch_request record, got {rec.get('type')!r}")
        q = rec.get("query")
        band = rec.get("price_band")
        win = rec.get("date_window")
        return cls(
            anchor_id=None if rec.get("anchor_id") is None else int(rec["anchor_id"]),
            query=query_from_record(q) if q is not None else None,
            radius=None if rec.get("radius") is None else float(rec["radius"]),
            price_band=(int(band[0]), int(band[1])) if band else None,
            date_window=DateCombo(int(win[0]), int(win[1])) if win else None,
            flex_days=int(rec.get("flex_days", 0)),
            result_cap=int(rec.get("result_cap", 50)),
            request_id=int(rec.get("request_id", 0)),
        )


@dataclass(frozen=True)
class BatchResult:
    request_id: int
    ids: np.ndarray
    scores: np.ndarray  # embedding similarity, best first

    def to_record(self) -> dict:
        return {"type": "batch_result", "request_id": self.request_id,
                "ids": [int(x) for x in self.ids], "scores": [float(x) for x in self.scores]}


def _request_filter(cluster: ServingCluster, req: BatchRetrievalRequest) -> Filter:
    if req.query is not None:
        base = Filter.for_query(req.query)
        center = req.query.map_bounds.center if req.query.map_bounds is not None else \
            req.query.location_cell.bounds().center
    else:
        base = Filter()
        center = None
    if req.anchor_id is not None:
        row = int(cluster.world.index_of([req.anchor_id])[0])
        center = tuple(float(x) for x in cluster.world.lat_lon[row])
    stay = req.date_window if req.date_window is not None else base.stay
    flex = req.flex_days if req.date_window is not None else base.flex_days
    near = (center[0], center[1], req.radius) if req.radius is not None else None
    return Filter(map_bounds=base.map_bounds, cell=base.cell, min_capacity=base.min_capacity,
                  price_range=req.price_band, stay=stay, flex_days=flex, near=near)


def batch_retrieve(cluster: ServingCluster, requests: Sequence[BatchRetrievalRequest],
                   nprobes: int | None = None) -> list[BatchResult]:
    """Answer offline requests by embedding similarity under the request filters.

    With no latency budget the default probes every cluster, which makes the
    answer exact.
    """
    probes = cluster.kmeans.k if nprobes is None else nprobes
    out = []
    for req in requests:
        if req.anchor_id is not None:
            try:
                q_emb = cluster.table.lookup(req.anchor_id)
            except KeyError:
                raise InputDomainError(f"unknown anchor listing {req.anchor_id}") from None
        else:
            q_emb = cluster.encode([req.query])[0]
        flt = _request_filter(cluster, req)
        parts = []
        for leaf in cluster.leaves:
            res = ivf_search(leaf.index, q_emb, min(probes, leaf.index.k), flt,
                             top_k=req.result_cap)
            parts.append(Candidates(res.ids, res.scores))
        best = Candidates.concat(parts).best(req.result_cap)
        out.append(BatchResult(req.request_id, best.ids, best.scores))
    return out


__all__ = [
    "BatchResult", "BatchRetrievalRequest", "CascadeConfig", "CascadeResult", "Candidates",
    "ConfigurationError", "LeafShard", "ServingCluster", "batch_retrieve", "build_cluster",
    "first_stage_score", "leaf_first_stage", "leaf_refresh", "leaf_retrieve", "leaf_search",
    "model_encoder", "root_search", "setwise_rerank", "shard_of",
]
