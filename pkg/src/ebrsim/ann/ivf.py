"""Inverted-file index with filter-during-scan and real-time attribute updates.

An index pins one embedding table and one k-means model fitted on it. Each
listing is tagged with its cluster; a search ranks centroids against the
query, scans the inverted lists of the best ``nprobes`` clusters and applies
the filter predicate to every scanned listing before scoring it.

Embeddings and cluster tags only change with the daily rebuild. Prices and
availability change continuously through :func:`apply_update` and are read
from a calendar snapshot taken once per search, so one search never mixes
two states of the update stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..domain import InputDomainError, GeoCell, Query, Rect
from ..flexdate import (
    CalendarSnapshot,
    CalendarStore,
    DateCombo,
    ListingUpdate,
    enumerate_combos,
    load_calendar,
    save_calendar,
)
from ..io import read_bundle, write_bundle
from ..twotower.network import Similarity, score
from ..twotower.training import EmbeddingTable
from .kmeans import KMeansModel


class IndexVersionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Filter:
    """Search predicate; every unset field matches everything.

    ``price_range`` bounds the nightly price in cents. With a stay it applies
    to the mean nightly price of some feasible date combo; without one it
    applies to tonight's (day 0) price. ``near`` is ``(lat, lon, radius)``
    and keeps listings within that grid distance of the point.
    """

    map_bounds: Rect | None = None
    cell: GeoCell | None = None
    min_capacity: int | None = None
    amenity_mask: int = 0
    price_range: tuple[int, int] | None = None
    stay: DateCombo | None = None
    flex_days: int = 0
    near: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        if self.flex_days < 0:
            raise InputDomainError("flex_days must be >= 0")
        if self.near is not None and not self.near[2] >= 0.0:
            raise InputDomainError("radius must be nonnegative")
        if self.price_range is not None and self.price_range[0] > self.price_range[1]:
            raise InputDomainError("empty price range")

    @property
    def is_empty(self) -> bool:
        return (self.map_bounds is None and self.cell is None and self.min_capacity is None
                and self.amenity_mask == 0 and self.price_range is None and self.stay is None
                and self.near is None)

    @property
    def needs_calendar(self) -> bool:
        return self.stay is not None or self.price_range is not None

    def combos(self, horizon: int) -> list[DateCombo]:
        if self.stay is None:
            return []
        return enumerate_combos(self.stay.checkin, self.stay.nights, self.flex_days, horizon)

    @classmethod
    def for_query(cls, query: Query, **extra) -> Filter:
        """The filter a search query implies: viewport, party size and dates.

        A query without a viewport is restricted to its location cell.
        """
        cell = query.location_cell if query.map_bounds is None else None
        return cls(map_bounds=query.map_bounds, cell=cell, min_capacity=query.num_guests,
                   stay=DateCombo(query.checkin, query.nights), flex_days=query.flex_days,
                   **extra)


class AttributeStore:
    """Filterable listing attributes: static columns plus the live calendar."""

    def __init__(self, ids: np.ndarray, lat_lon: np.ndarray, cell_indices: np.ndarray,
                 capacity: np.ndarray, amenities: np.ndarray, calendar: CalendarStore):
        self.ids = np.asarray(ids, dtype=np.int64)
        if not np.array_equal(self.ids, calendar.ids):
            raise InputDomainError("calendar rows must follow the attribute rows")
        self.lat_lon = np.asarray(lat_lon, dtype=np.float64)
        self.cell_indices = np.asarray(cell_indices, dtype=np.int64)
        self.capacity = np.asarray(capacity, dtype=np.int64)
        self.amenities = np.asarray(amenities, dtype=np.int64)
        for a in (self.ids, self.lat_lon, self.cell_indices, self.capacity, self.amenities):
            a.setflags(write=False)
        self.calendar = calendar

    @classmethod
    def from_world(cls, world, calendar: CalendarStore | None = None) -> AttributeStore:
        return cls(world.ids, world.lat_lon, world.cell_indices, world.capacity,
                   world.amenities, calendar or CalendarStore.from_world(world))

    def __len__(self) -> int:
        return self.ids.shape[0]

    def snapshot(self) -> CalendarSnapshot:
        return self.calendar.snapshot()

    def mask(self, rows: np.ndarray, flt: Filter, snap: CalendarSnapshot | None = None
             ) -> np.ndarray:
        """Which of ``rows`` satisfy ``flt`` under the calendar snapshot ``snap``."""
        rows = np.asarray(rows, dtype=np.int64)
        ok = np.ones(rows.shape[0], dtype=bool)
        if flt.map_bounds is not None:
            ll = self.lat_lon[rows]
            r = flt.map_bounds
            ok &= ((ll[:, 0] >= r.lat_min) & (ll[:, 0] <= r.lat_max)
                   & (ll[:, 1] >= r.lon_min) & (ll[:, 1] <= r.lon_max))
        if flt.near is not None:
            lat, lon, radius = flt.near
            ll = self.lat_lon[rows]
            ok &= np.hypot(ll[:, 0] - lat, ll[:, 1] - lon) <= radius
        if flt.cell is not None:
            ok &= self.cell_indices[rows, flt.cell.resolution] == flt.cell.cell_index
        if flt.min_capacity is not None:
            ok &= self.capacity[rows] >= flt.min_capacity
        if flt.amenity_mask:
            ok &= (self.amenities[rows] & flt.amenity_mask) == flt.amenity_mask
        if flt.needs_calendar and ok.any():
            snap = snap or self.snapshot()
            live = rows[ok]
            if flt.stay is not None:
                keep = snap.feasible_mask(live, flt.combos(snap.horizon), flt.price_range)
            else:
                lo, hi = flt.price_range
                _, px = snap.gather(live, np.array([0, 1]))
                tonight = px[:, 1] - px[:, 0]
                keep = (tonight >= lo) & (tonight <= hi)
            ok[ok] = keep
        return ok


@dataclass(eq=False)
class IvfIndex:
    table: EmbeddingTable
    kmeans: KMeansModel
    tags: np.ndarray
    lists: tuple[np.ndarray, ...]  # row positions per cluster, ascending id order
    attributes: AttributeStore
    build_id: str = ""

    @property
    def k(self) -> int:
        return self.kmeans.k

    @property
    def similarity(self) -> Similarity:
        return self.table.similarity

    @property
    def update_seq(self) -> int:
        return self.attributes.calendar.acked_seq

    def memory_bytes(self) -> dict[str, int]:
        emb = self.table.vectors.nbytes + self.table.ids.nbytes
        index = self.kmeans.centroids.nbytes + self.tags.nbytes
        attrs = sum(a.nbytes for a in (self.attributes.lat_lon, self.attributes.cell_indices,
                                        self.attributes.capacity, self.attributes.amenities))
        cal = self.attributes.calendar.memory_bytes()["total"]
        return {"embeddings": emb, "centroids_and_tags": index, "attributes": attrs,
                "calendar": cal, "total": emb + index + attrs + cal}


def build_ivf(table: EmbeddingTable, kmeans: KMeansModel, attributes: AttributeStore
              ) -> IvfIndex:
    if kmeans.table_version and kmeans.table_version != table.version:
        raise IndexVersionError(
            f"k-means fitted on table {kmeans.table_version}, got {table.version}")
    if not np.array_equal(table.ids, attributes.ids):
        raise IndexVersionError("attribute rows do not match the embedding table")
    tags = kmeans.assign(table.vectors).astype(np.int64)
    order = np.argsort(tags, kind="stable")
    bounds = np.searchsorted(tags[order], np.arange(kmeans.k + 1))
    lists = tuple(order[bounds[c]:bounds[c + 1]] for c in range(kmeans.k))
    for a in (tags, *lists):
        a.setflags(write=False)
    return IvfIndex(table, kmeans, tags, lists, attributes, table.version)


@dataclass(frozen=True)
class SearchResult:
    ids: np.ndarray
    scores: np.ndarray
    rows: np.ndarray
    scanned: int = 0
    snapshot_seq: int = 0

    def __len__(self) -> int:
        return self.ids.shape[0]


def top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` best scores, ties broken by ascending id."""
    n = scores.shape[0]
    if k <= 0 or n == 0:
        return np.zeros(0, dtype=np.int64)
    if n > 4 * k:
        kth = np.partition(-scores, k - 1)[k - 1]
        cand = np.flatnonzero(-scores <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], -scores[cand]))
    return cand[order[:k]]


def _scan(table: EmbeddingTable, rows: np.ndarray, q: np.ndarray, flt: Filter | None,
          attributes: AttributeStore | None, snap: CalendarSnapshot | None, k: int
          ) -> SearchResult:
    scanned = rows.shape[0]
    if flt is not None and not flt.is_empty:
        if attributes is None:
            raise InputDomainError("a non-empty filter needs an attribute store")
        rows = rows[attributes.mask(rows, flt, snap)]
    s = score(q[None, :], table.vectors[rows], table.similarity)
    ids = table.ids[rows]
    pick = top_k(ids, s, k)
    return SearchResult(ids[pick], s[pick], rows[pick], scanned,
                        snap.seq if snap is not None else 0)


def ivf_search(index: IvfIndex, q_emb: np.ndarray, nprobes: int, flt: Filter | None = None,
               top_k: int = 100, snapshot: CalendarSnapshot | None = None) -> SearchResult:
    if not 1 <= nprobes <= index.k:
        raise InputDomainError(f"nprobes must lie in 1..{index.k}, got {nprobes}")
    q = np.asarray(q_emb, dtype=np.float64)
    if q.shape != (index.table.dim,):
        raise InputDomainError(f"query embedding must have shape ({index.table.dim},)")
    probe = index.kmeans.rank_centroids(q)[:nprobes]
    rows = np.sort(np.concatenate([index.lists[c] for c in probe]))
    snap = snapshot
    if snap is None and flt is not None and flt.needs_calendar:
        snap = index.attributes.snapshot()
    return _scan(index.table, rows, q, flt, index.attributes, snap, top_k)


def brute_force_knn(table: EmbeddingTable, q_emb: np.ndarray, flt: Filter | None = None,
                    top_k: int = 100, attributes: AttributeStore | None = None,
                    snapshot: CalendarSnapshot | None = None) -> SearchResult:
    """Exact scan of every filter-passing listing; the reference for IVF recall."""
    q = np.asarray(q_emb, dtype=np.float64)
    if q.shape != (table.dim,):
        raise InputDomainError(f"query embedding must have shape ({table.dim},)")
    snap = snapshot
    if snap is None and attributes is not None and flt is not None and flt.needs_calendar:
        snap = attributes.snapshot()
    return _scan(table, np.arange(len(table)), q, flt, attributes, snap, top_k)


def apply_update(index: IvfIndex, update: ListingUpdate) -> int:
    """Apply a price/availability update; searches started after the return see it."""
    return index.attributes.calendar.apply(update)


# -- persistence -------------------------------------------------------------------------

def _calendar_path(path: Path) -> Path:
    return path.with_name(path.name + ".calendar")


def save_index(path: str | Path, index: IvfIndex) -> None:
    path = Path(path)
    km = index.kmeans
    a = index.attributes
    write_bundle(path, "ivf_index", {
        "k": km.k,
        "metric": km.metric.value,
        "similarity": index.similarity.value,
        "augmented": km.augmented,
        "max_norm": km.max_norm,
        "iterations": km.iterations,
        "seed": km.seed,
        "inertia": km.inertia,
        "model_version": index.table.model_version,
        "tick": index.table.tick,
        "build_id": index.build_id,
    }, {
        "ids": index.table.ids, "vectors": index.table.vectors,
        "centroids": km.centroids, "sizes": km.sizes, "tags": index.tags,
        "lat_lon": a.lat_lon, "cell_indices": a.cell_indices, "capacity": a.capacity,
        "amenities": a.amenities,
    })
    save_calendar(_calendar_path(path), a.calendar)


def load_index(path: str | Path) -> IvfIndex:
    path = Path(path)
    h, arr = read_bundle(path, "ivf_index")
    table = EmbeddingTable(arr["ids"], arr["vectors"], Similarity(h["similarity"]),
                           h["model_version"], int(h["tick"]))
    km = KMeansModel(arr["centroids"], Similarity(h["metric"]), int(h["iterations"]),
                     int(h["seed"]), arr["sizes"], bool(h["augmented"]), float(h["max_norm"]),
                     table.version, list(h["inertia"]))
    calendar = load_calendar(_calendar_path(path))
    attrs = AttributeStore(arr["ids"], arr["lat_lon"], arr["cell_indices"], arr["capacity"],
                           arr["amenities"], calendar)
    index = build_ivf(table, km, attrs)
    if not np.array_equal(index.tags, arr["tags"]):
        raise IndexVersionError(f"{path}: stored cluster tags disagree with the centroids")
    return index
