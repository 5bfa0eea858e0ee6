import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ebrsim.domain import ActionCategory, InputDomainError, Query, geo_cell
from ebrsim.sampling import (
    NEGATIVE_CATEGORIES,
    CategoryPools,
    NegativeSamplingPolicy,
    TripKey,
    draw_negatives,
    example_from_record,
    example_to_record,
    group_trips,
    los_bucket,
    search_based_samples,
    trip_based_samples,
    truncate,
)
from ebrsim.worldgen import Booking, JourneyLog, SearchEvent

I, V, W, B = (ActionCategory.IMPRESSED, ActionCategory.VIEWED, ActionCategory.WISHLISTED,
              ActionCategory.BOOKED)
CELL = geo_cell(0.5, 0.5, 2)


def q(nights=3, guests=2, place=0):
    return Query(place_id=place, location_cell=CELL, num_guests=guests, checkin=10, nights=nights)


def make_log(rows, user=1, booked=None, query=None):
    """rows: list of [(listing, action), ...] per search, one day apart."""
    searches, bookings = [], []
    for i, row in enumerate(rows):
        s = SearchEvent(i, user, float(i), query or q(), tuple(l for l, _ in row),
                        tuple(a for _, a in row))
        searches.append(s)
        if booked is not None and booked in s.impressions and s.action_of(booked) == B:
            bookings.append(Booking(user, booked, i))
    return JourneyLog(tuple(searches), tuple(bookings))


# Five searches; booked listing 99 appears only in searches 3 to 5 and is booked in 5.
FIG = [
    [(1, I), (2, V), (3, I)],
    [(4, W), (5, I), (1, V)],
    [(99, I), (6, I), (7, V)],
    [(8, I), (99, V), (9, I)],
    [(10, I), (11, W), (99, B)],
]


def test_search_based_discards_searches_without_booked_listing():
    ex = search_based_samples(make_log(FIG, booked=99))
    assert [e.search_id for e in ex] == [2, 3, 4]
    assert all(e.positive == 99 and 99 not in e.negatives for e in ex)
    assert ex[0].negatives == (6, 7)


def test_search_based_no_bookings_is_empty():
    assert search_based_samples(make_log(FIG)) == []
    assert search_based_samples(JourneyLog(())) == []


def test_search_based_nine_negatives():
    row = [(100 + i, I) for i in range(9)] + [(7, B)]
    (ex,) = search_based_samples(make_log([row], booked=7))
    assert len(ex.negatives) == 9


def test_search_based_lookback_window():
    ex = search_based_samples(make_log(FIG, booked=99), lookback=1.0)
    assert [e.search_id for e in ex] == [3, 4]


def test_los_buckets():
    assert [los_bucket(n) for n in (1, 2, 3, 5, 6, 13, 14, 60)] == [0, 0, 1, 1, 2, 2, 3, 3]
    with pytest.raises(InputDomainError):
        los_bucket(0)


def test_group_trips_keys():
    a = SearchEvent(0, 1, 0.0, q(nights=2), (1,), (I,))
    b = SearchEvent(1, 1, 1.0, q(nights=4), (2,), (I,))
    trips = group_trips(JourneyLog((a, b)))
    assert len(trips) == 2 and TripKey.of(a) != TripKey.of(b)
    single = group_trips(JourneyLog((a,)))
    assert list(single.values()) == [[a]]
    fig = group_trips(make_log(FIG, booked=99))
    assert len(fig) == 1 and len(next(iter(fig.values()))) == 5


def test_trip_based_uses_early_searches():
    log = make_log(FIG, booked=99)
    policy = NegativeSamplingPolicy((1 / 3, 1 / 3, 1 / 3), 9)
    ex = trip_based_samples(group_trips(log), policy, rng_seed=0)
    assert len(ex) == 5
    seen = set().union(*(e.negatives for e in ex))
    assert seen & {1, 2, 3, 4, 5}
    assert all(99 not in e.negatives for e in ex)


def test_policy_impressed_only_excludes_booked():
    log = make_log([[(1, I), (2, I), (3, B)]], booked=3)
    (ex,) = trip_based_samples(group_trips(log), NegativeSamplingPolicy((1, 0, 0), 9))
    assert set(ex.negatives) <= {1, 2}


def test_policy_fallback_when_category_empty():
    log = make_log([[(1, I), (2, V), (3, I)], [(4, V), (5, B)]], booked=5)
    policy = NegativeSamplingPolicy((0, 0, 1), 3)
    ex = trip_based_samples(group_trips(log), policy)
    assert all(len(e.negatives) == 3 for e in ex)
    assert all(c in (I, V) for e in ex for c in e.negative_categories)


def test_policy_validation():
    with pytest.raises(InputDomainError):
        NegativeSamplingPolicy.normalized((0, 0, 0))
    with pytest.raises(InputDomainError):
        NegativeSamplingPolicy((0.5, 0.5, 0.5))
    with pytest.raises(InputDomainError):
        NegativeSamplingPolicy((1.2, -0.2, 0.0))
    assert NegativeSamplingPolicy.normalized((2, 1, 1)).weights == (0.5, 0.25, 0.25)


def test_category_frequencies_match_weights():
    pools = CategoryPools()
    for k, c in enumerate(NEGATIVE_CATEGORIES):
        pools.pools[c] = list(range(1000 * k, 1000 * k + 50))
    policy = NegativeSamplingPolicy((1 / 3, 1 / 3, 1 / 3), 9)
    rng = np.random.default_rng(5)
    counts = Counter()
    for _ in range(1200):
        counts.update(c for _, c in draw_negatives(pools, policy, rng))
    n = sum(counts.values())
    assert n >= 10_000
    stat = sum((counts[c] - n / 3) ** 2 / (n / 3) for c in NEGATIVE_CATEGORIES)
    # Two degrees of freedom: the survival function is exp(-x / 2).
    assert math.exp(-stat / 2) > 0.01


def test_trip_pools_contain_search_pools(journeys):
    search_ex = search_based_samples(journeys)
    by_search = {s.search_id: s for s in journeys.searches}
    trips = group_trips(journeys)
    key_of = {s.search_id: k for k, v in trips.items() for s in v}
    for e in search_ex[:300]:
        trip = trips[key_of[e.search_id]]
        assert by_search[e.search_id] in trip
        pools = CategoryPools.from_searches(trip, exclude=e.positive)
        everything = set().union(*map(set, pools.pools.values()))
        assert set(e.negatives) <= everything


def test_trip_samples_deterministic_and_order_free(journeys):
    trips = group_trips(journeys)
    a = trip_based_samples(trips, rng_seed=3)
    rev = dict(reversed(list(trips.items())))
    assert a == trip_based_samples(rev, rng_seed=3)
    assert a != trip_based_samples(trips, rng_seed=4)


def test_truncate_and_record_round_trip(journeys):
    ex = trip_based_samples(group_trips(journeys), rng_seed=1)
    short = truncate(ex, 50, seed=2)
    assert len(short) == 50 and short == truncate(ex, 50, seed=2)
    pos = [ex.index(e) for e in short]
    assert pos == sorted(pos)
    assert all(example_from_record(example_to_record(e)) == e for e in short)


actions = st.sampled_from([I, V, W])


@st.composite
def logs(draw):
    n = draw(st.integers(1, 6))
    booked = draw(st.integers(0, 15))
    rows = []
    for i in range(n):
        ids = draw(st.lists(st.integers(0, 15), min_size=1, max_size=8, unique=True))
        rows.append([(l, draw(actions)) for l in ids])
    if draw(st.booleans()):
        last = [p for p in rows[-1] if p[0] != booked]
        rows[-1] = last + [(booked, B)]
    nights = draw(st.integers(1, 20))
    return make_log(rows, booked=booked, query=q(nights=nights))


@given(logs(), st.integers(0, 3), st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_fuzz_positive_never_a_negative(log, seed, w):
    if sum(w) == 0:
        w = [1, 0, 0]
    policy = NegativeSamplingPolicy.normalized(w, 5)
    for e in search_based_samples(log) + trip_based_samples(group_trips(log), policy, seed):
        assert e.positive not in e.negatives
        assert len(set(e.negatives)) == len(e.negatives)
