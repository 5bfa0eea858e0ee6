"""Deterministic synthetic marketplace: listings, places, users and search journeys.

The world is a latent-factor model. Every listing carries a hidden quality
vector and every search a hidden guest-taste vector; their inner product,
plus geographic and capacity-fit terms, is the ground-truth relevance that the
first-stage ranker sees in full and the two-tower model can only approximate
from observable features.

Journeys are generated trip by trip. Early searches are broad (the place's
default viewport) and later ones zoom in toward the listing that is
eventually booked. The booked listing's first impression is pushed into the
final part of the journey for a configurable share of bookings, which is the
bias that search-based sampling inherits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .flexdate import enumerate_combos
from .domain import (
    LATENT_DIM,
    NUM_AMENITIES,
    RESOLUTIONS,
    ActionCategory,
    Engagement,
    GeoCell,
    InputDomainError,
    Listing,
    ListingId,
    PlaceId,
    Query,
    Rect,
    UserId,
    geo_cell,
    query_from_record,
    query_to_record,
)
from .io import read_bundle, write_bundle

CAPACITY_PENALTY = 1.0e4
RELEVANCE_CLIP = 1.0e3
# Resolution at which a place's location cell is reported on its queries.
PLACE_CELL_RESOLUTION = 2


@dataclass(frozen=True)
class WorldConfig:
    num_listings: int = 10_000
    num_users: int = 8_000
    num_places: int = 12
    affinity_noise: float = 0.2
    min_searches: int = 6
    max_searches: int = 16
    # Marginal per-impression rates of reaching each category; the booked rate
    # sets the per-trip booking probability 1 - (1 - p)^impressions.
    funnel: tuple[float, float, float, float] = (1.0, 0.3, 0.1, 0.02)
    booking_skew: float = 0.95
    late_fraction: float = 0.3
    page_size: int = 10
    horizon: int = 180
    sim_days: float = 120.0
    global_taste: float = 1.5
    place_taste: float = 0.7
    geo_weight: float = 1.0
    place_radius: tuple[float, float] = (0.04, 0.09)
    capacity_weight: float = 0.15
    production_noise: float = 10.0
    booking_temperature: float = 0.3
    popularity_sigma: float = 1.2
    amenity_signal: float = 3.0
    mean_occupancy: float = 0.3
    flex_probability: float = 0.25
    side_search_probability: float = 0.05
    seed: int = 7

    def __post_init__(self) -> None:
        for name in ("num_listings", "num_users", "num_places"):
            if getattr(self, name) <= 0:
                raise InputDomainError(f"{name} must be positive")
        if not 1 <= self.min_searches <= self.max_searches:
            raise InputDomainError("need 1 <= min_searches <= max_searches")
        if len(self.funnel) != 4 or any(not 0.0 <= p <= 1.0 for p in self.funnel):
            raise InputDomainError("funnel must hold four probabilities in [0, 1]")
        if any(a < b for a, b in zip(self.funnel, self.funnel[1:])):
            raise InputDomainError("funnel probabilities must be nonincreasing")
        for name in ("booking_skew", "late_fraction", "mean_occupancy", "flex_probability",
                     "side_search_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InputDomainError(f"{name} must lie in [0, 1]")
        if self.page_size < 1 or self.horizon < 30:
            raise InputDomainError("page_size >= 1 and horizon >= 30 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> WorldConfig:
        d = dict(d)
        for name in ("funnel", "place_radius"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)


@dataclass(frozen=True)
class Place:
    id: PlaceId
    index: int
    center: tuple[float, float]
    radius: float
    taste: tuple[float, ...]
    weight: float

    @property
    def cell(self) -> GeoCell:
        return geo_cell(self.center[0], self.center[1], PLACE_CELL_RESOLUTION)


@dataclass(frozen=True)
class User:
    id: UserId
    latent: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class World:
    config: WorldConfig
    listings: tuple[Listing, ...]
    places: tuple[Place, ...]
    users: tuple[User, ...]
    global_taste: np.ndarray
    calendar_available: np.ndarray  # bool [num_listings, horizon]
    calendar_prices: np.ndarray  # int64 cents [num_listings, horizon]

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([l.id for l in self.listings], dtype=np.int64)

    @cached_property
    def lat_lon(self) -> np.ndarray:
        return np.array([l.lat_lon for l in self.listings], dtype=np.float64)

    @cached_property
    def cell_indices(self) -> np.ndarray:
        return np.array([[c.cell_index for c in l.cells] for l in self.listings], dtype=np.int64)

    @cached_property
    def capacity(self) -> np.ndarray:
        return np.array([l.capacity for l in self.listings], dtype=np.int64)

    @cached_property
    def amenities(self) -> np.ndarray:
        return np.array([l.amenities for l in self.listings], dtype=np.int64)

    @cached_property
    def quality(self) -> np.ndarray:
        return np.array([l.quality_latent for l in self.listings], dtype=np.float64)

    @cached_property
    def engagement(self) -> np.ndarray:
        return np.array([l.engagement.as_tuple() for l in self.listings], dtype=np.int64)

    @cached_property
    def base_price(self) -> np.ndarray:
        return np.array([l.base_price for l in self.listings], dtype=np.float64)

    @cached_property
    def place_by_id(self) -> dict[PlaceId, Place]:
        return {p.id: p for p in self.places}

    def index_of(self, listing_ids) -> np.ndarray:
        """Row positions of listing ids (ids are generated in ascending order)."""
        ids = np.asarray(listing_ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, ids)
        pos = np.clip(pos, 0, len(self.ids) - 1)
        if np.any(self.ids[pos] != ids):
            raise KeyError("unknown listing id")
        return pos

    def listing(self, listing_id: ListingId) -> Listing:
        return self.listings[int(self.index_of([listing_id])[0])]


@dataclass(frozen=True)
class SearchEvent:
    search_id: int
    user_id: UserId
    timestamp: float
    query: Query
    impressions: tuple[ListingId, ...]
    actions: tuple[ActionCategory, ...]

    def action_of(self, listing_id: ListingId) -> ActionCategory | None:
        try:
            return self.actions[self.impressions.index(listing_id)]
        except ValueError:
            return None


@dataclass(frozen=True)
class Booking:
    user_id: UserId
    listing_id: ListingId
    search_id: int


@dataclass(frozen=True)
class JourneyLog:
    searches: tuple[SearchEvent, ...]
    bookings: tuple[Booking, ...] = ()
    # Generator-side bookkeeping: index (into the trip's main searches) of the
    # booked listing's first impression, and the trip length. Not used by sampling.
    first_impression: tuple[tuple[int, int], ...] = field(default=(), compare=False)

    @cached_property
    def by_id(self) -> dict[int, SearchEvent]:
        return {s.search_id: s for s in self.searches}

    def late_booking_fraction(self, late_fraction: float = 0.3) -> float:
        """Share of bookings whose listing first appears in the final part of the trip."""
        if not self.first_impression:
            return 0.0
        late = sum(
            1 for first, n in self.first_impression if first >= late_start(n, late_fraction)
        )
        return late / len(self.first_impression)


def late_start(num_searches: int, late_fraction: float) -> int:
    """First search index belonging to the final ``late_fraction`` of a journey."""
    return min(num_searches - 1, int(math.floor((1.0 - late_fraction) * num_searches)))


# -- generation -----------------------------------------------------------------------

def _random_ids(rng: np.random.Generator, n: int) -> np.ndarray:
    ids: set[int] = set()
    out = []
    while len(out) < n:
        for x in rng.integers(1, 1 << 62, size=n - len(out), dtype=np.int64):
            x = int(x)
            if x not in ids:
                ids.add(x)
                out.append(x)
    return np.sort(np.array(out, dtype=np.int64))


def _markov_calendar(rng: np.random.Generator, occupancy: np.ndarray, horizon: int,
                     mean_run: float = 4.0) -> np.ndarray:
    """Availability with booked nights arriving in runs; stationary share = occupancy."""
    occ = np.clip(occupancy, 0.01, 0.95)
    p_leave = 1.0 / mean_run
    p_enter = np.minimum(1.0, occ * p_leave / (1.0 - occ))
    booked = rng.random(occ.shape[0]) < occ
    avail = np.empty((occ.shape[0], horizon), dtype=bool)
    for day in range(horizon):
        avail[:, day] = ~booked
        u = rng.random(occ.shape[0])
        booked = np.where(booked, u >= p_leave, u < p_enter)
    return avail


def generate_world(config: WorldConfig) -> World:
    rng = np.random.default_rng(config.seed)
    n, k = config.num_listings, LATENT_DIM

    direction = rng.normal(size=k)
    global_taste = config.global_taste * direction / np.linalg.norm(direction)

    place_ids = _random_ids(rng, config.num_places)
    centers = rng.uniform(0.1, 0.9, size=(config.num_places, 2))
    radii = rng.uniform(*config.place_radius, size=config.num_places)
    weights = rng.zipf(1.6, size=config.num_places).astype(np.float64)
    weights = np.minimum(weights, 8.0)
    weights /= weights.sum()
    tastes = rng.normal(scale=config.place_taste, size=(config.num_places, k))
    places = tuple(
        Place(int(place_ids[i]), i, (float(centers[i, 0]), float(centers[i, 1])),
              float(radii[i]), tuple(float(x) for x in tastes[i]), float(weights[i]))
        for i in range(config.num_places)
    )

    # Listings cluster around places; a tenth are scattered uniformly.
    home = rng.choice(config.num_places, size=n, p=weights)
    pos = centers[home] + rng.normal(size=(n, 2)) * radii[home, None] * 0.8
    scattered = rng.random(n) < 0.1
    pos[scattered] = rng.uniform(0.0, 1.0, size=(int(scattered.sum()), 2))
    pos = np.clip(pos, 0.0, 1.0)

    quality = rng.normal(size=(n, k))
    appeal = quality @ global_taste / math.sqrt(k)
    appeal_z = appeal / (np.std(appeal) + 1e-12)

    capacity = np.clip(np.round(np.exp(rng.normal(1.1, 0.55, size=n))), 1, 16).astype(np.int64)

    amen_w = rng.normal(size=(NUM_AMENITIES, k)) * config.amenity_signal / math.sqrt(k)
    amen_b = rng.uniform(-1.5, 0.5, size=NUM_AMENITIES)
    amen_logit = quality @ amen_w.T + amen_b
    amen_bits = rng.random((n, NUM_AMENITIES)) < 1.0 / (1.0 + np.exp(-amen_logit))
    amenities = (amen_bits.astype(np.int64) << np.arange(NUM_AMENITIES, dtype=np.int64)).sum(1)

    price_w = rng.normal(size=k) / math.sqrt(k)
    base_price = np.exp(4.4 + 0.25 * (quality @ price_w) + 0.15 * np.log(capacity)
                        + 0.2 * rng.normal(size=n))
    base_price = np.round(base_price, 2)

    popularity = np.exp(config.popularity_sigma * rng.normal(size=n) + 0.5 * appeal_z)
    views = rng.poisson(40.0 * popularity)
    wishlists = rng.poisson(4.0 * popularity)
    bookings = rng.poisson(1.5 * popularity)
    reviews = rng.binomial(bookings, 0.6)

    ids = _random_ids(rng, n)
    listings = []
    for i in range(n):
        lat, lon = float(pos[i, 0]), float(pos[i, 1])
        listings.append(Listing(
            id=int(ids[i]),
            lat_lon=(lat, lon),
            cells=tuple(geo_cell(lat, lon, r) for r in RESOLUTIONS),
            capacity=int(capacity[i]),
            amenities=int(amenities[i]),
            quality_latent=tuple(float(x) for x in quality[i]),
            engagement=Engagement(int(views[i]), int(wishlists[i]), int(bookings[i]),
                                  int(reviews[i])),
            base_price=float(base_price[i]),
        ))

    user_ids = _random_ids(rng, config.num_users)
    user_latent = rng.normal(size=(config.num_users, k))
    users = tuple(User(int(user_ids[i]), tuple(float(x) for x in user_latent[i]))
                  for i in range(config.num_users))

    m = config.mean_occupancy
    alpha = 2.0 * m / (1 - m) if m < 1 else 50.0
    occupancy = rng.beta(alpha, 2.0, size=n) if m > 0 else np.zeros(n)
    available = _markov_calendar(rng, occupancy, config.horizon)
    day = np.arange(config.horizon)
    weekend = ((day % 7) >= 5).astype(np.float64)
    nightly = base_price[:, None] * (1.0 + 0.2 * weekend[None, :]
                                     + 0.05 * rng.normal(size=(n, config.horizon)))
    prices = np.maximum(np.round(nightly * 100.0), 100).astype(np.int64)

    return World(config, tuple(listings), places, users, global_taste, available, prices)


# -- ground-truth relevance -----------------------------------------------------------

def relevance_terms(world: World, query: Query, rows: np.ndarray | None = None
                    ) -> np.ndarray:
    """Ground-truth relevance of listings (by row position) for a query.

    Capacity-violating listings are pushed ``CAPACITY_PENALTY`` below the clipped
    range, so they rank under every listing that fits the party.
    """
    rows = np.arange(len(world.listings)) if rows is None else np.asarray(rows)
    place = world.place_by_id[query.place_id]
    g = np.asarray(query.guest_latent, dtype=np.float64)
    # Row-wise reduction so a listing's score never depends on its batch.
    affinity = (world.quality[rows] * g).sum(axis=1) / math.sqrt(LATENT_DIM)
    d = np.hypot(world.lat_lon[rows, 0] - place.center[0], world.lat_lon[rows, 1] - place.center[1])
    cfg = world.config
    cap = world.capacity[rows]
    raw = (affinity - cfg.geo_weight * d / place.radius
           - cfg.capacity_weight * np.abs(cap - query.num_guests))
    raw = np.clip(raw, -RELEVANCE_CLIP, RELEVANCE_CLIP)
    return np.where(cap < query.num_guests, raw - CAPACITY_PENALTY, raw)


def guest_latent(world: World, place: Place, user: User) -> np.ndarray:
    return (world.global_taste + np.asarray(place.taste)
            + world.config.affinity_noise * np.asarray(user.latent))


@dataclass(frozen=True, eq=False)
class EmbeddingCorpus:
    """Listing vectors plus a query sample living in the same space."""

    vectors: np.ndarray
    query_directions: np.ndarray  # unit norm; what a dot-product search needs
    query_vectors: np.ndarray  # directions with listing-like norms, for Euclidean


def count_scaled_corpus(world: World, num_queries: int = 300, dim: int = 16,
                        power: float = 0.7, pseudo_count: float = 40.0, seed: int = 0
                        ) -> EmbeddingCorpus:
    """Embeddings whose norms grow with view counts.

    Directions mix each listing's quality latent with its location through
    fixed random maps, so nearby and similar listings point the same way.
    The norm is ``(pseudo_count + views) ** power``: a tower fed engagement
    features tends to push popular listings outward, and this corpus makes
    that effect explicit without training a model.
    """
    if dim < 2 or num_queries < 1:
        raise InputDomainError("need dim >= 2 and at least one query")
    rng = np.random.default_rng([world.config.seed, seed, 11])
    a = rng.normal(size=(LATENT_DIM, dim)) / math.sqrt(LATENT_DIM)
    b = 2.0 * rng.normal(size=(2, dim))
    u = world.quality @ a + (world.lat_lon - 0.5) @ b
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    norm = (pseudo_count + world.engagement[:, 0].astype(np.float64)) ** power
    vectors = u * norm[:, None]
    q = rng.normal(size=(num_queries, LATENT_DIM)) @ a + (rng.random((num_queries, 2)) - 0.5) @ b
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    qn = rng.choice(norm, size=num_queries)
    return EmbeddingCorpus(vectors, q, q * qn[:, None])


# -- journeys ---------------------------------------------------------------------------

def _run_end(available: np.ndarray) -> np.ndarray:
    """run_end[l, d] = first unavailable day >= d (horizon when none)."""
    n, horizon = available.shape
    out = np.empty((n, horizon + 1), dtype=np.int32)
    out[:, horizon] = horizon
    for d in range(horizon - 1, -1, -1):
        out[:, d] = np.where(available[:, d], out[:, d + 1], d)
    return out


def _stay_mask(run_end: np.ndarray, checkin: int, nights: int, flex: int, horizon: int
               ) -> np.ndarray:
    mask = np.zeros(run_end.shape[0], dtype=bool)
    for c in enumerate_combos(checkin, nights, flex, horizon):
        mask |= run_end[:, c.checkin] >= c.checkout
    return mask


def _in_rect(lat_lon: np.ndarray, rect: Rect) -> np.ndarray:
    return ((lat_lon[:, 0] >= rect.lat_min) & (lat_lon[:, 0] <= rect.lat_max)
            & (lat_lon[:, 1] >= rect.lon_min) & (lat_lon[:, 1] <= rect.lon_max))


_GUEST_P = np.array([0.15, 0.40, 0.12, 0.18, 0.05, 0.06, 0.02, 0.02])


def _actions(rng: np.random.Generator, rel: np.ndarray, funnel) -> np.ndarray:
    spread = np.std(rel) + 1e-9
    z = (rel - rel.mean()) / spread
    lift = 2.0 / (1.0 + np.exp(-1.5 * z))
    p_view = np.clip(funnel[1] * lift, 0.0, 1.0)
    p_wish = np.minimum(np.clip(funnel[2] * lift, 0.0, 1.0), p_view)
    u = rng.random(rel.shape[0])
    out = np.full(rel.shape[0], int(ActionCategory.IMPRESSED), dtype=np.int64)
    out[u < p_view] = ActionCategory.VIEWED
    out[u < p_wish] = ActionCategory.WISHLISTED
    return out


def simulate_journeys(world: World, config: WorldConfig | None = None) -> JourneyLog:
    cfg = config or world.config
    rng = np.random.default_rng([cfg.seed, 1])
    horizon = world.calendar_available.shape[1]
    run_end = _run_end(world.calendar_available)
    place_w = np.array([p.weight for p in world.places])
    searches: list[SearchEvent] = []
    bookings: list[Booking] = []
    first_impr: list[tuple[int, int]] = []

    # Users start their trips in a random order spread over the simulated period.
    starts = rng.uniform(0.0, cfg.sim_days, size=len(world.users))
    pending: list[tuple[float, UserId, Query, list, list]] = []

    for ui, user in enumerate(world.users):
        place = world.places[int(rng.choice(len(world.places), p=place_w))]
        g = guest_latent(world, place, user)
        guests = int(rng.choice(8, p=_GUEST_P)) + 1
        nights = int(min(21, 1 + rng.poisson(3.0)))
        checkin = int(rng.integers(8, horizon - nights - 8))
        flex = int(rng.integers(1, 4)) if rng.random() < cfg.flex_probability else 0
        n = int(rng.integers(cfg.min_searches, cfg.max_searches + 1))
        p_book = 1.0 - (1.0 - cfg.funnel[3]) ** (n * cfg.page_size)
        will_book = rng.random() < p_book

        base_q = Query(place.id, place.cell, guests, checkin, nights, None, flex,
                       tuple(float(x) for x in g))
        c0 = np.array(place.center)
        w0, w1 = 2.0 * place.radius, 0.25 * place.radius
        broad = Rect.around(c0[0], c0[1], w0)
        # Every later viewport lies inside the broad one, so work on that subset.
        eligible = np.flatnonzero(_in_rect(world.lat_lon, broad) & (world.capacity >= guests))
        eligible = eligible[_stay_mask(run_end[eligible], checkin, nights, flex, horizon)]
        if eligible.shape[0] == 0:
            continue
        rel_all = relevance_terms(world, base_q, eligible)
        elig_loc = world.lat_lon[eligible]
        # Target: the listing the journey converges on (booked if the trip books).
        logits = rel_all / cfg.booking_temperature
        p = np.exp(logits - logits.max())
        target_pos = int(rng.choice(eligible.shape[0], p=p / p.sum()))
        target_row = int(eligible[target_pos])
        target_loc = world.lat_lon[target_row]

        if will_book:
            if rng.random() < cfg.booking_skew:
                first = int(rng.integers(late_start(n, cfg.late_fraction), n))
            else:
                first = 0
        t = starts[ui]
        trip_searches = []
        for s in range(n):
            frac = s / (n - 1) if n > 1 else 1.0
            center = (1.0 - frac) * c0 + frac * target_loc
            half = (1.0 - frac) * w0 + frac * w1
            bounds = Rect.around(float(center[0]), float(center[1]), half)
            q = Query(place.id, place.cell, guests, checkin, nights, bounds, flex,
                      base_q.guest_latent)
            in_view = np.flatnonzero(_in_rect(elig_loc, bounds))
            show_target = will_book and s >= first
            if not show_target:
                in_view = in_view[in_view != target_pos]
            noisy = rel_all[in_view] + cfg.production_noise * rng.normal(size=in_view.shape[0])
            take = min(cfg.page_size, in_view.shape[0])
            top = in_view[np.argsort(-noisy, kind="stable")[:take]]
            if cfg.funnel[0] < 1.0:
                top = top[rng.random(top.shape[0]) < cfg.funnel[0]]
            if show_target and target_pos not in top:
                if top.shape[0] >= cfg.page_size:
                    top = top[:-1]
                slot = int(rng.integers(0, top.shape[0] + 1))
                top = np.insert(top, slot, target_pos)
            acts = _actions(rng, rel_all[top], cfg.funnel) if top.shape[0] else np.zeros(0, int)
            if show_target:
                j = int(np.flatnonzero(top == target_pos)[0])
                if s == n - 1:
                    acts[j] = ActionCategory.BOOKED
                else:
                    acts[j] = max(acts[j], ActionCategory.VIEWED
                                  if rng.random() < 0.6 else ActionCategory.WISHLISTED)
            trip_searches.append((t, q, world.ids[eligible[top]], acts))
            t += float(rng.exponential(0.8))
            if rng.random() < cfg.side_search_probability:
                # A detour with a different party size; never books.
                side_guests = guests + 1 if guests < 16 else guests - 1
                sq = Query(place.id, place.cell, side_guests, checkin, nights, bounds, flex,
                           base_q.guest_latent)
                side_rows = in_view[world.capacity[eligible[in_view]] >= side_guests]
                side_rows = side_rows[side_rows != target_pos]
                side_noisy = rel_all[side_rows] + cfg.production_noise * rng.normal(
                    size=side_rows.shape[0])
                side_top = side_rows[np.argsort(-side_noisy, kind="stable")[:cfg.page_size]]
                side_acts = _actions(rng, rel_all[side_top], cfg.funnel) if side_top.shape[0] \
                    else np.zeros(0, int)
                trip_searches.append((t, sq, world.ids[eligible[side_top]], side_acts))
                t += float(rng.exponential(0.8))
        pending.append((starts[ui], user.id, will_book, world.ids[target_row], trip_searches))
        if will_book:
            first_impr.append((first, n))

    # Assign search ids in global timestamp order.
    flat = []
    for _, uid, booked, target_id, trip in pending:
        party = trip[0][1].num_guests
        last_main = max(i for i, (_, q, _, _) in enumerate(trip) if q.num_guests == party)
        for i, (t, q, impr, acts) in enumerate(trip):
            flat.append((t, uid, q, impr, acts, booked and i == last_main, target_id))
    flat.sort(key=lambda r: (r[0], r[1]))
    for sid, (t, uid, q, impr, acts, is_booking, target_id) in enumerate(flat):
        searches.append(SearchEvent(
            sid, uid, float(t), q,
            tuple(int(x) for x in impr),
            tuple(ActionCategory(int(a)) for a in acts),
        ))
        if is_booking:
            bookings.append(Booking(uid, int(target_id), sid))
    return JourneyLog(tuple(searches), tuple(bookings), tuple(first_impr))


# -- persistence -------------------------------------------------------------------------

def save_world(path, world: World) -> None:
    """Binary bundle holding everything needed to rebuild the world exactly."""
    places = [{"id": p.id, "index": p.index, "center": list(p.center), "radius": p.radius,
               "taste": list(p.taste), "weight": p.weight} for p in world.places]
    write_bundle(path, "world", {"config": world.config.to_dict(), "places": places}, {
        "ids": world.ids, "lat_lon": world.lat_lon, "capacity": world.capacity,
        "amenities": world.amenities, "quality": world.quality, "engagement": world.engagement,
        "base_price": world.base_price,
        "user_ids": np.array([u.id for u in world.users], dtype=np.int64),
        "user_latent": np.array([u.latent for u in world.users], dtype=np.float64),
        "global_taste": world.global_taste,
        "calendar_bits": np.packbits(world.calendar_available, axis=1),
        "calendar_prices": world.calendar_prices,
    })


def load_world(path) -> World:
    header, a = read_bundle(path, "world")
    config = WorldConfig.from_dict(header["config"])
    places = tuple(Place(int(p["id"]), int(p["index"]), tuple(p["center"]), float(p["radius"]),
                         tuple(p["taste"]), float(p["weight"])) for p in header["places"])
    listings = tuple(
        Listing(id=int(a["ids"][i]), lat_lon=(float(a["lat_lon"][i, 0]), float(a["lat_lon"][i, 1])),
                cells=tuple(geo_cell(float(a["lat_lon"][i, 0]), float(a["lat_lon"][i, 1]), r)
                            for r in RESOLUTIONS),
                capacity=int(a["capacity"][i]), amenities=int(a["amenities"][i]),
                quality_latent=tuple(float(x) for x in a["quality"][i]),
                engagement=Engagement(*(int(x) for x in a["engagement"][i])),
                base_price=float(a["base_price"][i]))
        for i in range(a["ids"].shape[0]))
    users = tuple(User(int(u), tuple(float(x) for x in lat))
                  for u, lat in zip(a["user_ids"], a["user_latent"]))
    available = np.unpackbits(a["calendar_bits"], axis=1, count=config.horizon).astype(bool)
    return World(config, listings, places, users, a["global_taste"], available,
                 a["calendar_prices"])


def search_to_record(s: SearchEvent) -> dict:
    return {"type": "search", "search_id": s.search_id, "user_id": s.user_id,
            "timestamp": s.timestamp, "query": query_to_record(s.query),
            "impressions": list(s.impressions), "actions": [int(x) for x in s.actions]}


def search_from_record(rec: dict) -> SearchEvent:
    if rec.get("type") != "search":
        raise InputDomainError(f"expected a search record, got {rec.get('type')!r}")
    return SearchEvent(int(rec["search_id"]), int(rec["user_id"]), float(rec["timestamp"]),
                       query_from_record(rec["query"]),
                       tuple(int(x) for x in rec["impressions"]),
                       tuple(ActionCategory(int(x)) for x in rec["actions"]))


def journey_records(log: JourneyLog):
    for s in log.searches:
        yield search_to_record(s)
    for b in log.bookings:
        yield {"type": "booking", "user_id": b.user_id, "listing_id": b.listing_id,
               "search_id": b.search_id}
    yield {"type": "journey_meta", "first_impression": [list(x) for x in log.first_impression]}


def journeys_from_records(records) -> JourneyLog:
    searches, bookings, first = [], [], ()
    for rec in records:
        kind = rec.get("type")
        if kind == "search":
            searches.append(search_from_record(rec))
        elif kind == "booking":
            bookings.append(Booking(int(rec["user_id"]), int(rec["listing_id"]),
                                    int(rec["search_id"])))
        elif kind == "journey_meta":
            first = tuple((int(a), int(b)) for a, b in rec["first_impression"])
        else:
            raise InputDomainError(f"unexpected record type {kind!r} in a journey log")
    return JourneyLog(tuple(searches), tuple(bookings), first)
