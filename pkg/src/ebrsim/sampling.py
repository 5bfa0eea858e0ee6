"""Contrastive training-set construction from journey logs.

Two schemes are provided:

* search-based: one example per search in which the booked listing was shown;
  every other impression of that search is a negative.
* trip-based: searches sharing (user, place, guests, length-of-stay bucket) form
  a trip; every search of a booked trip yields an example, and negatives are
  drawn from the whole trip, category first, then uniformly inside the category.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .domain import (
    ActionCategory,
    InputDomainError,
    ListingId,
    PlaceId,
    Query,
    UserId,
    query_from_record,
    query_to_record,
)
from .worldgen import JourneyLog, SearchEvent

NEGATIVE_CATEGORIES = (ActionCategory.IMPRESSED, ActionCategory.VIEWED, ActionCategory.WISHLISTED)
LOS_BUCKETS = ((1, 2), (3, 5), (6, 13), (14, None))


def los_bucket(nights: int) -> int:
    if nights < 1:
        raise InputDomainError("nights must be at least 1")
    for i, (lo, hi) in enumerate(LOS_BUCKETS):
        if hi is None or lo <= nights <= hi:
            return i
    raise AssertionError("unreachable")


@dataclass(frozen=True, order=True)
class TripKey:
    user_id: UserId
    place_id: PlaceId
    num_guests: int
    los_bucket: int

    @classmethod
    def of(cls, search: SearchEvent) -> TripKey:
        q = search.query
        return cls(search.user_id, q.place_id, q.num_guests, los_bucket(q.nights))


@dataclass(frozen=True)
class TrainingExample:
    query: Query
    positive: ListingId
    negatives: tuple[ListingId, ...]
    negative_categories: tuple[ActionCategory, ...]
    trip_key: TripKey
    search_id: int = -1
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if self.positive in self.negatives:
            raise ValueError("positive listed among negatives")
        if len(set(self.negatives)) != len(self.negatives):
            raise ValueError("duplicate negatives")
        if len(self.negatives) != len(self.negative_categories):
            raise ValueError("one category per negative required")


@dataclass(frozen=True)
class NegativeSamplingPolicy:
    """Category weights over (impressed, viewed, wishlisted) and a per-example count."""

    weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    negatives_per_example: int = 9

    def __post_init__(self) -> None:
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise InputDomainError("three nonnegative category weights required")
        if sum(self.weights) <= 0:
            raise InputDomainError("category weights are all zero")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise InputDomainError("category weights must sum to 1")
        if self.negatives_per_example < 1:
            raise InputDomainError("negatives_per_example must be positive")

    @classmethod
    def normalized(cls, weights, negatives_per_example: int = 9) -> NegativeSamplingPolicy:
        w = [float(x) for x in weights]
        total = sum(w)
        if len(w) != 3 or any(x < 0 for x in w):
            raise InputDomainError("three nonnegative category weights required")
        if total <= 0:
            raise InputDomainError("category weights are all zero")
        return cls(tuple(x / total for x in w), negatives_per_example)


def search_based_samples(log: JourneyLog, lookback: float = 30.0) -> list[TrainingExample]:
    """One example per looked-back search where the booked listing was impressed."""
    by_user: dict[UserId, list[SearchEvent]] = defaultdict(list)
    for s in log.searches:
        by_user[s.user_id].append(s)
    out: list[TrainingExample] = []
    for booking in log.bookings:
        booked_at = log.by_id[booking.search_id].timestamp
        for s in by_user[booking.user_id]:
            if not booked_at - lookback <= s.timestamp <= booked_at:
                continue
            if booking.listing_id not in s.impressions:
                continue
            pairs = [(l, a) for l, a in zip(s.impressions, s.actions) if l != booking.listing_id]
            out.append(TrainingExample(
                query=s.query,
                positive=booking.listing_id,
                negatives=tuple(l for l, _ in pairs),
                negative_categories=tuple(min(a, ActionCategory.WISHLISTED) for _, a in pairs),
                trip_key=TripKey.of(s),
                search_id=s.search_id,
                timestamp=s.timestamp,
            ))
    return out


def group_trips(log: JourneyLog) -> dict[TripKey, list[SearchEvent]]:
    trips: dict[TripKey, list[SearchEvent]] = defaultdict(list)
    for s in sorted(log.searches, key=lambda s: (s.timestamp, s.search_id)):
        trips[TripKey.of(s)].append(s)
    return dict(trips)


def trip_rng(seed: int, key: TripKey) -> np.random.Generator:
    """Independent stream per trip so per-trip work can run in any order."""
    digest = hashlib.blake2b(
        f"{seed}:{key.user_id}:{key.place_id}:{key.num_guests}:{key.los_bucket}".encode(),
        digest_size=16,
    ).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


@dataclass
class CategoryPools:
    """Listings of a trip bucketed by the strongest non-booking action they received."""

    pools: dict[ActionCategory, list[ListingId]] = field(
        default_factory=lambda: {c: [] for c in NEGATIVE_CATEGORIES})

    @classmethod
    def from_searches(cls, searches: list[SearchEvent], exclude: ListingId) -> CategoryPools:
        best: dict[ListingId, ActionCategory] = {}
        for s in searches:
            for l, a in zip(s.impressions, s.actions):
                if l == exclude:
                    continue
                a = min(a, ActionCategory.WISHLISTED)
                if l not in best or a > best[l]:
                    best[l] = a
        out = cls()
        for l in sorted(best):
            out.pools[best[l]].append(l)
        return out

    def size(self) -> int:
        return sum(len(v) for v in self.pools.values())


def draw_negatives(pools: CategoryPools, policy: NegativeSamplingPolicy,
                   rng: np.random.Generator) -> list[tuple[ListingId, ActionCategory]]:
    """Category-first sampling without replacement.

    An empty category is dropped and the remaining weights renormalized, so a
    draw only comes up short once every non-booked listing has been taken.
    """
    remaining = {c: list(v) for c, v in pools.pools.items()}
    weights = dict(zip(NEGATIVE_CATEGORIES, policy.weights))
    drawn: list[tuple[ListingId, ActionCategory]] = []
    while len(drawn) < policy.negatives_per_example:
        live = [c for c in NEGATIVE_CATEGORIES if remaining[c]]
        if not live:
            break
        w = np.array([weights[c] for c in live], dtype=np.float64)
        if w.sum() <= 0:
            # Only zero-weight categories are left; fall back to their sizes.
            w = np.array([len(remaining[c]) for c in live], dtype=np.float64)
        cat = live[int(rng.choice(len(live), p=w / w.sum()))]
        pool = remaining[cat]
        drawn.append((pool.pop(int(rng.integers(len(pool)))), cat))
    return drawn


def booking_in(searches: list[SearchEvent]) -> tuple[int, ListingId] | None:
    """(position, listing) of the booking inside a trip, if any."""
    for i, s in enumerate(searches):
        for l, a in zip(s.impressions, s.actions):
            if a == ActionCategory.BOOKED:
                return i, l
    return None


def trip_based_samples(trips: dict[TripKey, list[SearchEvent]],
                       policy: NegativeSamplingPolicy | None = None,
                       rng_seed: int = 0) -> list[TrainingExample]:
    policy = policy or NegativeSamplingPolicy()
    out: list[TrainingExample] = []
    for key in sorted(trips):
        searches = trips[key]
        found = booking_in(searches)
        if found is None:
            continue
        pos, booked = found
        journey = searches[:pos + 1]
        pools = CategoryPools.from_searches(journey, exclude=booked)
        if pools.size() == 0:
            continue
        rng = trip_rng(rng_seed, key)
        for s in journey:
            drawn = draw_negatives(pools, policy, rng)
            out.append(TrainingExample(
                query=s.query,
                positive=booked,
                negatives=tuple(l for l, _ in drawn),
                negative_categories=tuple(c for _, c in drawn),
                trip_key=key,
                search_id=s.search_id,
                timestamp=s.timestamp,
            ))
    return out


def truncate(examples: list[TrainingExample], size: int, seed: int) -> list[TrainingExample]:
    """Seeded random subset of ``size`` examples, kept in their original order."""
    if size >= len(examples):
        return list(examples)
    keep = np.sort(np.random.default_rng(seed).choice(len(examples), size=size, replace=False))
    return [examples[i] for i in keep]


def example_to_record(ex: TrainingExample) -> dict:
    return {
        "type": "training_example",
        "query": query_to_record(ex.query),
        "positive": ex.positive,
        "negatives": list(ex.negatives),
        "negative_categories": [int(c) for c in ex.negative_categories],
        "trip_key": [ex.trip_key.user_id, ex.trip_key.place_id, ex.trip_key.num_guests,
                     ex.trip_key.los_bucket],
        "search_id": ex.search_id,
        "timestamp": ex.timestamp,
    }


def example_from_record(rec: dict) -> TrainingExample:
    return TrainingExample(
        query=query_from_record(rec["query"]),
        positive=int(rec["positive"]),
        negatives=tuple(int(x) for x in rec["negatives"]),
        negative_categories=tuple(ActionCategory(int(c)) for c in rec["negative_categories"]),
        trip_key=TripKey(*(int(x) for x in rec["trip_key"])),
        search_id=int(rec.get("search_id", -1)),
        timestamp=float(rec.get("timestamp", 0.0)),
    )
