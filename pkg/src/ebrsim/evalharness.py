"""Offline evaluation: logged recall, traffic replay, the nprobes sweep and sampler comparison.

Logged recall ranks, for every held-out search, the listings the user was
shown plus a few random eligible-but-unshown listings, and asks whether the
booked listing lands in the top ``threshold``.

Traffic replay re-runs a sample of held-out queries against the full set of
listings eligible under their filters. The first-stage ranker's top
``truth_k`` is the ground truth, and a retriever's recall measures how much
of it survives in its own top ``retrieve_k``.

Scorers share one calling convention: ``scorer(queries, rows)`` takes a
list of queries and a parallel list of world row arrays and returns one
score array per query.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .ann.ivf import AttributeStore, Filter, IvfIndex, brute_force_knn, build_ivf, ivf_search
from .ann.kmeans import ClusterStats, KMeansModel, cluster_stats, kmeans_fit
from .domain import InputDomainError, ListingId, Query
from .io import stable_hash
from .sampling import (
    NegativeSamplingPolicy,
    TrainingExample,
    booking_in,
    group_trips,
    search_based_samples,
    trip_based_samples,
    truncate,
)
from .twotower.features import listing_features
from .twotower.network import TowerConfig, TwoTowerModel, score
from .twotower.training import EmbeddingTable, embed_queries, train
from .worldgen import JourneyLog, World, count_scaled_corpus, relevance_terms

log = logging.getLogger(__name__)

Scorer = Callable[[Sequence[Query], Sequence[np.ndarray]], list]

DEFAULT_NEGATIVES = 100
TRAIN_FRACTION = 0.7
BASELINE_WEIGHTS = (0.2, 0.3, 0.3, 0.2)  # views, wishlists, bookings, reviews
SWEEP_NPROBES = (2, 4, 16, 32)


# -- reports -----------------------------------------------------------------------------


@dataclass(frozen=True)
class RecallReport:
    metric: str
    threshold: int
    value: float
    fingerprint: str = ""
    num_queries: int = 0
    flagged: int = 0  # replay queries whose eligible set was smaller than truth_k
    per_query: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"recall {self.value} outside [0, 1]")

    def to_record(self) -> dict:
        return {"type": "recall_report", "metric": self.metric, "threshold": self.threshold,
                "value": self.value, "fingerprint": self.fingerprint,
                "num_queries": self.num_queries, "flagged": self.flagged}


def _mean(values: Sequence[float]) -> float:
    # Fixed summation order: results do not depend on how work was split.
    return math.fsum(values) / len(values)


# -- scorers -----------------------------------------------------------------------------


def baseline_scorer(world: World, weights: Sequence[float] = BASELINE_WEIGHTS
                    ) -> dict[ListingId, float]:
    """Query-independent linear score of log engagement counters."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (4,) or np.any(w < 0):
        raise InputDomainError("four nonnegative engagement weights required")
    s = np.log1p(world.engagement.astype(np.float64)) @ w
    return {int(i): float(v) for i, v in zip(world.ids, s)}


def static_scorer(world: World, scores: Mapping[ListingId, float] | np.ndarray) -> Scorer:
    """Scorer that ignores the query; ``scores`` is by listing id or by row."""
    if isinstance(scores, Mapping):
        by_row = np.array([scores[int(i)] for i in world.ids], dtype=np.float64)
    else:
        by_row = np.asarray(scores, dtype=np.float64)
    return lambda queries, rows: [by_row[r] for r in rows]


def model_scorer(model: TwoTowerModel, world: World) -> Scorer:
    """Two-tower similarity; listing embeddings are computed once."""
    emb = model.listing.forward(listing_features(world, model.config.location_features))
    sim = model.config.similarity

    def fn(queries, rows):
        qe = embed_queries(model, queries, world)
        return [score(qe[i][None, :], emb[r], sim) for i, r in enumerate(rows)]
    return fn


def first_stage_scorer(world: World) -> Scorer:
    return lambda queries, rows: [relevance_terms(world, q, r) for q, r in zip(queries, rows)]


def _rank(rows: np.ndarray, scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Rows best first; ties by ascending listing id."""
    return rows[np.lexsort((ids[rows], -np.asarray(scores)))]


# -- data splits -------------------------------------------------------------------------


@dataclass(frozen=True)
class TemporalSplit:
    train_end: float
    train_log: JourneyLog
    train_trips: dict
    eval_trips: dict


def temporal_split(world: World, log_: JourneyLog, train_fraction: float = TRAIN_FRACTION
                   ) -> TemporalSplit:
    """Trips finished by the cut train; trips starting after it evaluate; the rest are dropped."""
    if not 0.0 < train_fraction < 1.0:
        raise InputDomainError("train_fraction must lie in (0, 1)")
    t_end = train_fraction * world.config.sim_days
    trips = group_trips(log_)
    train_trips = {k: v for k, v in trips.items() if v[-1].timestamp <= t_end}
    eval_trips = {k: v for k, v in trips.items() if v[0].timestamp > t_end}
    kept = sorted((s for v in train_trips.values() for s in v), key=lambda s: s.search_id)
    kept_ids = {s.search_id for s in kept}
    bookings = tuple(b for b in log_.bookings if b.search_id in kept_ids)
    return TemporalSplit(t_end, JourneyLog(tuple(kept), bookings), train_trips, eval_trips)


def eligible_rows(attributes: AttributeStore, query: Query) -> np.ndarray:
    """Exhaustive filter scan: every listing the query's filters admit."""
    rows = np.arange(len(attributes))
    return rows[attributes.mask(rows, Filter.for_query(query))]


# -- logged recall -----------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSearch:
    query: Query
    timestamp: float
    shown: np.ndarray  # rows
    booked: int  # row
    negatives: np.ndarray  # rows, disjoint from shown
    journey_position: float  # 0 at the first search of the trip, 1 at the booking

    @property
    def candidates(self) -> np.ndarray:
        return np.unique(np.concatenate([self.shown, [self.booked], self.negatives]))


@dataclass(frozen=True, eq=False)
class EvalLog:
    searches: tuple[EvalSearch, ...]
    train_end: float
    num_negatives: int

    def __len__(self) -> int:
        return len(self.searches)

    def __post_init__(self) -> None:
        for s in self.searches:
            if s.timestamp <= self.train_end:
                raise InputDomainError("eval search inside the training period")
            if np.intersect1d(s.negatives, s.shown).size or s.booked in s.negatives:
                raise InputDomainError("negatives overlap shown or booked listings")


def build_eval_log(world: World, split: TemporalSplit, num_negatives: int = DEFAULT_NEGATIVES,
                   seed: int = 0, attributes: AttributeStore | None = None) -> EvalLog:
    """Every search of every booked held-out trip, up to and including the booking."""
    attributes = attributes or AttributeStore.from_world(world)
    rng = np.random.default_rng([seed, 17])
    out = []
    for key in sorted(split.eval_trips):
        trip = split.eval_trips[key]
        found = booking_in(trip)
        if found is None:
            continue
        pos, booked_id = found
        booked = int(world.index_of([booked_id])[0])
        for i, s in enumerate(trip[:pos + 1]):
            shown = world.index_of(s.impressions) if s.impressions else np.zeros(0, np.int64)
            exclude = np.append(shown, booked)
            pool = np.setdiff1d(eligible_rows(attributes, s.query), exclude)
            neg = np.sort(rng.choice(pool, size=min(num_negatives, pool.size), replace=False))
            out.append(EvalSearch(s.query, s.timestamp, np.asarray(shown, dtype=np.int64),
                                  booked, neg.astype(np.int64), i / max(1, pos)))
    return EvalLog(tuple(out), split.train_end, num_negatives)


def logged_recall(scorer: Scorer, eval_log: EvalLog, world: World, threshold: int = 10,
                  fingerprint: str = "") -> RecallReport:
    if len(eval_log) == 0:
        raise InputDomainError("empty eval log")
    if threshold < 1:
        raise InputDomainError("threshold must be positive")
    cands = [s.candidates for s in eval_log.searches]
    scores = scorer([s.query for s in eval_log.searches], cands)
    hits = np.array([s.booked in _rank(c, sc, world.ids)[:threshold]
                     for s, c, sc in zip(eval_log.searches, cands, scores)], dtype=np.float64)
    return RecallReport("logged_recall", threshold, _mean(hits), fingerprint, len(hits),
                        per_query=hits)


# -- traffic replay ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReplaySet:
    queries: tuple[Query, ...]
    eligible: tuple[np.ndarray, ...]  # rows per query, from an exhaustive scan

    def __len__(self) -> int:
        return len(self.queries)


def build_replay_set(world: World, eval_log: EvalLog, num_queries: int = 300, seed: int = 0,
                     min_eligible: int = 0, attributes: AttributeStore | None = None
                     ) -> ReplaySet:
    """Sample held-out queries and scan every listing for eligibility.

    ``min_eligible`` skips queries whose eligible set is too small to say
    anything about retrieval.
    """
    attributes = attributes or AttributeStore.from_world(world)
    rng = np.random.default_rng([seed, 23])
    order = rng.permutation(len(eval_log))
    queries, eligible = [], []
    for i in order:
        q = eval_log.searches[int(i)].query
        rows = eligible_rows(attributes, q)
        if rows.size < max(min_eligible, 1):
            continue
        queries.append(q)
        eligible.append(rows)
        if len(queries) == num_queries:
            break
    return ReplaySet(tuple(queries), tuple(eligible))


def replay_recall(retrieval_fn: Scorer, first_stage_fn: Scorer, replay_set: ReplaySet,
                  world: World, truth_k: int = 100, retrieve_k: int | None = None,
                  fingerprint: str = "") -> RecallReport:
    if len(replay_set) == 0:
        raise InputDomainError("empty replay set")
    retrieve_k = truth_k if retrieve_k is None else retrieve_k
    if truth_k < 1 or retrieve_k < 1:
        raise InputDomainError("truth_k and retrieve_k must be positive")
    qs, el = list(replay_set.queries), list(replay_set.eligible)
    truth_scores = first_stage_fn(qs, el)
    got_scores = retrieval_fn(qs, el)
    recalls, flagged = [], 0
    for rows, ts, gs in zip(el, truth_scores, got_scores):
        k = min(truth_k, rows.size)
        flagged += k < truth_k
        truth = _rank(rows, ts, world.ids)[:k]
        got = _rank(rows, gs, world.ids)[:retrieve_k]
        recalls.append(np.intersect1d(truth, got).size / k)
    return RecallReport("replay_recall", truth_k, _mean(recalls), fingerprint, len(recalls),
                        flagged, per_query=np.array(recalls))


# -- nprobes sweep -----------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    metric: str
    nprobes: int
    recall: float


def ivf_recall(index: IvfIndex, queries: np.ndarray, nprobes: int, recall_k: int = 100
               ) -> float:
    """Mean overlap of IVF top-k with the exact top-k under the index's own metric."""
    vals = []
    for q in np.asarray(queries, dtype=np.float64):
        exact = brute_force_knn(index.table, q, top_k=recall_k).ids
        approx = ivf_search(index, q, nprobes, top_k=recall_k).ids
        vals.append(np.intersect1d(exact, approx).size / max(exact.size, 1))
    return _mean(vals)


def nprobes_sweep(index_euclidean: IvfIndex, index_dot: IvfIndex,
                  query_sample: np.ndarray | Mapping[str, np.ndarray],
                  nprobes_list: Sequence[int] = SWEEP_NPROBES, recall_k: int = 100
                  ) -> list[SweepRow]:
    """Recall of IVF against exact search per (metric, nprobes).

    ``query_sample`` is one array for both indexes or a mapping from metric
    name to its own query array.
    """
    rows = []
    for name, index in (("euclidean", index_euclidean), ("dot", index_dot)):
        qs = query_sample[name] if isinstance(query_sample, Mapping) else query_sample
        for p in sorted(nprobes_list):
            rows.append(SweepRow(name, int(p), ivf_recall(index, qs, int(p), recall_k)))
    return rows


SWEEP_COLUMNS = ("metric", "nprobes", "recall")


def write_sweep_csv(path: str | Path, rows: Sequence[SweepRow], fingerprint: str = "") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([*SWEEP_COLUMNS, "fingerprint"])
        for r in rows:
            w.writerow([r.metric, r.nprobes, f"{r.recall:.6f}", fingerprint])


def write_plot_data(path: str | Path, series: Mapping[str, Sequence[tuple[float, float]]],
                    fingerprint: str = "") -> None:
    """x/y series as long-format CSV: series, x, y."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["series", "x", "y", "fingerprint"])
        for name in series:
            for x, y in series[name]:
                w.writerow([name, x, y, fingerprint])


def cluster_size_series(model) -> list[tuple[float, float]]:
    """Cluster shares sorted largest first, as (rank, share) points."""
    st = cluster_stats(model)
    shares = np.sort(st.sizes)[::-1] / st.sizes.sum()
    return [(float(i), float(s)) for i, s in enumerate(shares)]


@dataclass(frozen=True, eq=False)
class CorpusSweep:
    """Sweep rows plus the k-means model of each metric on one corpus."""

    rows: tuple[SweepRow, ...]
    kmeans: Mapping[str, KMeansModel]

    def recall(self, metric: str, nprobes: int) -> float:
        for r in self.rows:
            if r.metric == metric and r.nprobes == nprobes:
                return r.recall
        raise KeyError((metric, nprobes))

    def stats(self, metric: str) -> ClusterStats:
        return cluster_stats(self.kmeans[metric])


def corpus_sweep(world: World, k: int = 128, iters: int = 25, kmeans_seed: int = 1,
                 nprobes_list: Sequence[int] = SWEEP_NPROBES, recall_k: int = 100,
                 num_queries: int = 300) -> CorpusSweep:
    """Cluster the count-scaled corpus under both metrics and sweep nprobes.

    Dot-product search takes unit query directions; Euclidean search takes
    the same directions scaled to listing-like norms.
    """
    corpus = count_scaled_corpus(world, num_queries)
    attrs = AttributeStore.from_world(world)
    indexes, models = {}, {}
    for metric in ("euclidean", "dot"):
        table = EmbeddingTable(world.ids.copy(), corpus.vectors, metric, "count_scaled", 0)
        models[metric] = kmeans_fit(table, k, iters=iters, seed=kmeans_seed)
        indexes[metric] = build_ivf(table, models[metric], attrs)
    rows = nprobes_sweep(indexes["euclidean"], indexes["dot"],
                         {"euclidean": corpus.query_vectors, "dot": corpus.query_directions},
                         nprobes_list, recall_k)
    return CorpusSweep(tuple(rows), models)


# -- sampler comparison ------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerComparison:
    set_size: int
    trip_logged: RecallReport
    search_logged: RecallReport
    trip_replay: RecallReport | None = None
    search_replay: RecallReport | None = None

    @property
    def logged_gap(self) -> float:
        return self.trip_logged.value - self.search_logged.value

    def to_records(self) -> list[dict]:
        out = []
        for scheme, reps in (("trip", (self.trip_logged, self.trip_replay)),
                             ("search", (self.search_logged, self.search_replay))):
            for r in reps:
                if r is not None:
                    out.append({**r.to_record(), "scheme": scheme, "set_size": self.set_size})
        return out


def training_sets(split: TemporalSplit, policy: NegativeSamplingPolicy | None = None,
                  seed: int = 0) -> tuple[list[TrainingExample], list[TrainingExample]]:
    """(trip-based, search-based) examples from the training period, truncated to equal size."""
    trip = trip_based_samples(split.train_trips, policy or NegativeSamplingPolicy(), seed)
    search = search_based_samples(split.train_log)
    if not trip or not search:
        raise InputDomainError("a sampling scheme produced no examples")
    n = min(len(trip), len(search))
    return truncate(trip, n, seed), truncate(search, n, seed + 1)


def compare_samplers(world: World, split: TemporalSplit, tower_config: TowerConfig,
                     eval_log: EvalLog, replay_set: ReplaySet | None = None,
                     policy: NegativeSamplingPolicy | None = None, seed: int = 0,
                     threshold: int = 10) -> SamplerComparison:
    """Train one model per sampling scheme with identical settings and evaluate both."""
    trip, search = training_sets(split, policy, seed)
    fp = stable_hash({"tower": tower_config.to_dict(), "seed": seed,
                      "world": world.config.to_dict()})
    reports = {}
    for name, examples in (("trip", trip), ("search", search)):
        model = train(TwoTowerModel.init(tower_config), examples, world).model
        scorer = model_scorer(model, world)
        reports[name] = (
            logged_recall(scorer, eval_log, world, threshold, fp),
            replay_recall(scorer, first_stage_scorer(world), replay_set, world, fingerprint=fp)
            if replay_set is not None else None,
        )
    return SamplerComparison(len(trip), reports["trip"][0], reports["search"][0],
                             reports["trip"][1], reports["search"][1])


# -- experiment presets ------------------------------------------------------------------

# Tower variants: V1 is pointwise with inner products;
# V3 is pairwise with Euclidean distance, ~20% wider, plus the location block.
VARIANTS = {
    "v1": {"similarity": "dot", "loss": "pointwise"},
    "v3": {"similarity": "euclidean", "loss": "pairwise", "v3_scale": True,
           "location_features": True},
}


def variant_config(name: str, num_places: int, seed: int, **overrides) -> TowerConfig:
    if name not in VARIANTS:
        raise InputDomainError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    return TowerConfig(num_places=num_places, seed=seed, **{**VARIANTS[name], **overrides})


@dataclass(frozen=True, eq=False)
class EvalContext:
    world: World
    journeys: JourneyLog
    split: TemporalSplit
    eval_log: EvalLog
    replay_set: ReplaySet

    @property
    def fingerprint(self) -> str:
        return stable_hash(self.world.config.to_dict())


def prepare_eval(world: World, journeys: JourneyLog, num_negatives: int = DEFAULT_NEGATIVES,
                 replay_queries: int = 300, min_eligible: int = 200, seed: int | None = None
                 ) -> EvalContext:
    seed = world.config.seed if seed is None else seed
    split = temporal_split(world, journeys)
    attrs = AttributeStore.from_world(world)
    el = build_eval_log(world, split, num_negatives, seed, attrs)
    rs = build_replay_set(world, el, replay_queries, seed, min_eligible, attrs)
    return EvalContext(world, journeys, split, el, rs)


def variant_replay(ctx: EvalContext, seed: int | None = None, **tower_overrides
                  ) -> dict[str, RecallReport]:
    """Replay recall@100 of the baseline scorer and the V1 and V3 models.

    Both models train on the same trip-based set with the same settings.
    """
    w = ctx.world
    seed = w.config.seed if seed is None else seed
    fs = first_stage_scorer(w)
    fp = ctx.fingerprint
    out = {"baseline": replay_recall(static_scorer(w, baseline_scorer(w)), fs, ctx.replay_set,
                                     w, fingerprint=fp)}
    trip, _ = training_sets(ctx.split, seed=seed)
    for name in ("v1", "v3"):
        cfg = variant_config(name, len(w.places), seed, **tower_overrides)
        model = train(TwoTowerModel.init(cfg), trip, w).model
        out[name] = replay_recall(model_scorer(model, w), fs, ctx.replay_set, w,
                                  fingerprint=stable_hash([fp, cfg.to_dict()]))
    return out


__all__ = [
    "BASELINE_WEIGHTS", "DEFAULT_NEGATIVES", "VARIANTS", "baseline_scorer", "build_eval_log",
    "build_replay_set", "cluster_size_series", "compare_samplers", "corpus_sweep",
    "CorpusSweep", "eligible_rows", "EvalContext", "EvalLog", "EvalSearch",
    "first_stage_scorer", "ivf_recall", "logged_recall", "model_scorer", "nprobes_sweep",
    "prepare_eval", "RecallReport", "replay_recall", "ReplaySet", "SamplerComparison", "Scorer",
    "static_scorer", "SweepRow", "temporal_split", "TemporalSplit", "training_sets",
    "variant_config", "variant_replay", "write_plot_data", "write_sweep_csv",
]
