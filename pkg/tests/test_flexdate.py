import numpy as np
import oracles
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ebrsim.domain import InputDomainError
from ebrsim.flexdate import (
    CalendarStore,
    DateCombo,
    DayChange,
    ListingUpdate,
    StaleUpdateError,
    apply_calendar_update,
    enumerate_combos,
    flexible_feasible_set,
    load_calendar,
    save_calendar,
    stay_feasible,
)

FUZZ_CASES = 10_000


def store(avail, prices, **kw):
    avail = np.atleast_2d(np.asarray(avail, dtype=bool))
    prices = np.atleast_2d(np.asarray(prices, dtype=np.int64))
    return CalendarStore(np.arange(1, avail.shape[0] + 1), avail, prices, **kw)


def test_combo_counts():
    assert len(enumerate_combos(20, 7, 3)) == 49
    assert enumerate_combos(20, 5, 0) == [DateCombo(20, 5)]
    # Checkout one day earlier than checkin+1 clamps to one night: 3 + 2 + 1 distinct stays.
    got = enumerate_combos(20, 1, 1)
    assert len(got) == 6
    assert {(c.checkin, c.nights) for c in got} == oracles.combos(20, 1, 1)


@given(st.integers(0, 60), st.integers(1, 20), st.integers(0, 6))
def test_combos_match_grid_oracle(checkin, nights, flex):
    got = enumerate_combos(checkin, nights, flex, horizon=70)
    assert {(c.checkin, c.nights) for c in got} == oracles.combos(checkin, nights, flex, 70)
    assert got == sorted(set(got))
    if checkin >= flex and nights > 2 * flex and checkin + nights + flex <= 70:
        assert len(got) == (2 * flex + 1) ** 2


def test_combo_validation():
    with pytest.raises(InputDomainError):
        enumerate_combos(3, 2, -1)
    with pytest.raises(InputDomainError):
        DateCombo(0, 0)


def test_stay_examples():
    s = store([True] * 10, [100, 120, 110] + [50] * 7)
    assert stay_feasible(s, 1, DateCombo(0, 3)) == 330
    assert stay_feasible(s, 1, DateCombo(2, 4)) == 110 + 150
    s2 = store([True, True, False, True], [1, 2, 3, 4])
    assert stay_feasible(s2, 1, DateCombo(1, 2)) is None
    assert stay_feasible(s2, 1, DateCombo(3, 1)) == 4
    with pytest.raises(InputDomainError):
        stay_feasible(s2, 1, DateCombo(3, 2))


def test_full_and_empty_listings():
    combos = enumerate_combos(20, 7, 3)
    full = store(np.ones(40, bool), np.full(40, 100))
    assert len(flexible_feasible_set(full, 1, combos)) == 49
    empty = store(np.zeros(40, bool), np.full(40, 100))
    assert flexible_feasible_set(empty, 1, combos) == {}


def test_flexible_set_fuzz_against_naive_loop():
    rng = np.random.default_rng(77)
    horizon = 60
    mismatches = 0
    for case in range(FUZZ_CASES):
        p_open = rng.uniform(0.3, 1.0)
        avail = rng.random(horizon) < p_open
        prices = rng.integers(0, 50_000, size=horizon)
        s = store(avail, prices)
        n = int(rng.integers(1, 12))
        ci = int(rng.integers(0, horizon - n))
        combos = enumerate_combos(ci, n, int(rng.integers(0, 4)), horizon)
        got = flexible_feasible_set(s, 1, combos)
        want = {}
        for c in combos:
            t = oracles.stay_total(avail, prices, c.checkin, c.nights)
            if t is not None:
                want[c] = t
        mismatches += got != want
        if case % 10 == 0:
            assert all(stay_feasible(s, 1, c) == want.get(c) for c in combos)
    assert mismatches == 0


def test_feasible_mask_matches_oracle():
    rng = np.random.default_rng(3)
    avail = rng.random((50, 40)) < 0.7
    prices = rng.integers(1_000, 20_000, size=(50, 40))
    s = store(avail, prices)
    snap = s.snapshot()
    for _ in range(200):
        n = int(rng.integers(1, 6))
        combos = enumerate_combos(int(rng.integers(0, 30)), n, int(rng.integers(0, 3)), 40)
        lo = int(rng.integers(1_000, 15_000))
        rng_ = (lo, lo + int(rng.integers(0, 8_000))) if rng.random() < 0.5 else None
        got = snap.feasible_mask(np.arange(50), combos, rng_)
        for r in range(50):
            ok = False
            for c in combos:
                t = oracles.stay_total(avail[r], prices[r], c.checkin, c.nights)
                if t is not None and (rng_ is None
                                      or rng_[0] * c.nights <= t <= rng_[1] * c.nights):
                    ok = True
            assert got[r] == ok


def test_closing_a_night_breaks_crossing_stays():
    s = store(np.ones(20, bool), np.full(20, 100))
    assert stay_feasible(s, 1, DateCombo(3, 4)) == 400
    apply_calendar_update(s, 1, 5, available=False)
    assert stay_feasible(s, 1, DateCombo(3, 4)) is None
    assert stay_feasible(s, 1, DateCombo(6, 4)) == 400


def test_price_change_is_linear():
    rng = np.random.default_rng(4)
    prices = rng.integers(100, 1000, size=30)
    s = store(np.ones(30, bool), prices)
    combos = enumerate_combos(10, 5, 3, 30)
    before = flexible_feasible_set(s, 1, combos)
    apply_calendar_update(s, 1, 12, price=int(prices[12]) + 250)
    after = flexible_feasible_set(s, 1, combos)
    for c in combos:
        delta = 250 if c.checkin <= 12 < c.checkout else 0
        assert after[c] - before[c] == delta


def test_interleaved_updates_equal_replay():
    rng = np.random.default_rng(9)
    n, horizon = 20, 30
    avail0 = rng.random((n, horizon)) < 0.6
    prices0 = rng.integers(0, 1000, size=(n, horizon))
    s = store(avail0, prices0, versions_per_generation=7)  # forces several compactions
    a, p = avail0.copy(), prices0.copy()
    seqs = np.zeros(n, dtype=int)
    for step in range(400):
        r = int(rng.integers(n))
        days = tuple(DayChange(int(d), bool(rng.random() < 0.5), int(rng.integers(0, 1000)))
                     for d in rng.choice(horizon, size=int(rng.integers(1, 4)), replace=False))
        seqs[r] += 1
        ack = s.apply(ListingUpdate(r + 1, int(seqs[r]), days))
        assert ack == step + 1
        for ch in days:
            a[r, ch.day], p[r, ch.day] = ch.available, ch.price
        if step % 17 == 0:
            c = DateCombo(int(rng.integers(0, horizon - 3)), 3)
            assert stay_feasible(s, r + 1, c) == oracles.stay_total(a[r], p[r], c.checkin, 3)
    da, dp = s.dense()
    assert np.array_equal(da, a) and np.array_equal(dp, p)
    assert s.generations > 1


def test_snapshot_isolation():
    s = store(np.ones(10, bool), np.full(10, 5))
    snap = s.snapshot()
    apply_calendar_update(s, 1, 2, available=False)
    assert stay_feasible(snap, 1, DateCombo(0, 5)) == 25
    assert stay_feasible(s, 1, DateCombo(0, 5)) is None


def test_update_errors():
    s = store(np.ones(10, bool), np.full(10, 5))
    with pytest.raises(InputDomainError):
        apply_calendar_update(s, 1, 10, price=3)
    s.apply(ListingUpdate(1, 5, (DayChange(0, price=1),)))
    with pytest.raises(StaleUpdateError):
        s.apply(ListingUpdate(1, 5, (DayChange(0, price=2),)))
    with pytest.raises(InputDomainError):
        DayChange(0)
    with pytest.raises(InputDomainError):
        DayChange(0, price=-1)
    rec = ListingUpdate(1, 6, (DayChange(3, True, 10),)).to_record()
    assert ListingUpdate.from_record(rec) == ListingUpdate(1, 6, (DayChange(3, True, 10),))


def test_memory_is_linear_in_horizon():
    for horizon in (90, 180, 360):
        s = store(np.ones((100, horizon), bool), np.ones((100, horizon), int))
        m = s.memory_bytes()
        assert m["availability_bits"] == 100 * ((horizon + 7) // 8)
        assert m["prices"] == 100 * horizon * 4
        assert m["per_listing"] == (horizon + 7) // 8 + 4 * horizon + 8


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    s = store(rng.random((5, 12)) < 0.5, rng.integers(0, 100, size=(5, 12)))
    apply_calendar_update(s, 3, 4, available=True, price=42)
    save_calendar(tmp_path / "c.bin", s)
    back = load_calendar(tmp_path / "c.bin")
    for x, y in zip(s.dense(), back.dense()):
        assert np.array_equal(x, y)
    assert back.acked_seq == s.acked_seq and back.last_seq(3) == 1
