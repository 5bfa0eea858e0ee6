"""Availability and nightly prices over a fixed lookahead horizon.

Each listing owns ``D`` availability bits (packed) and ``D`` nightly prices in
integer cents. Two derived arrays make any stay an O(1) lookup:

* ``run_end[d]``: first unavailable day at or after ``d`` (``D`` if none), so a
  stay ``(c, n)`` is feasible iff ``run_end[c] >= c + n``;
* ``prefix[d]``: sum of nightly prices before day ``d``, so its total is
  ``prefix[c + n] - prefix[c]``.

Concurrency: exactly one writer applies updates while any number of readers
take snapshots. The base arrays of a generation are never mutated. An update
writes the listing's full new row, with its derived tables, into the next
free slot of the generation's version buffer, and only then publishes
``(generation, seq, slots_used)`` as the acknowledged state with a single
reference store. A reader grabs that triple once and resolves every row to
its newest slot below ``slots_used``, so it always sees one consistent prefix
of the update sequence. A full buffer is folded into a fresh generation;
readers holding the old generation keep using it.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import MAX_FLEX_DAYS, InputDomainError, ListingId
from .io import read_bundle, write_bundle

DEFAULT_HORIZON = 180


@dataclass(frozen=True, order=True)
class DateCombo:
    checkin: int
    nights: int

    def __post_init__(self) -> None:
        if self.checkin < 0:
            raise InputDomainError(f"checkin {self.checkin} is negative")
        if self.nights < 1:
            raise InputDomainError(f"nights must be >= 1, got {self.nights}")

    @property
    def checkout(self) -> int:
        return self.checkin + self.nights


def enumerate_combos(checkin_center: int, nights: int, flex_days: int,
                     horizon: int | None = None) -> list[DateCombo]:
    """Stays reachable by moving checkin and checkout by up to ``flex_days`` each.

    The two shifts are independent; nights follow from the pair, are clamped
    to at least one, and duplicates are dropped. Combos starting before day 0
    are removed, and so are those ending past ``horizon`` when one is given.
    Output is sorted.
    """
    if flex_days < 0:
        raise InputDomainError(f"flex_days must be >= 0, got {flex_days}")
    if nights < 1:
        raise InputDomainError(f"nights must be >= 1, got {nights}")
    out = set()
    checkout_center = checkin_center + nights
    for dc in range(-flex_days, flex_days + 1):
        c = checkin_center + dc
        if c < 0:
            continue
        for dk in range(-flex_days, flex_days + 1):
            n = max(1, checkout_center + dk - c)
            if horizon is not None and c + n > horizon:
                continue
            out.add((c, n))
    return [DateCombo(c, n) for c, n in sorted(out)]


@dataclass(frozen=True)
class DayChange:
    day: int
    available: bool | None = None
    price: int | None = None  # cents

    def __post_init__(self) -> None:
        if self.available is None and self.price is None:
            raise InputDomainError("a day change must set availability or price")
        if self.price is not None and self.price < 0:
            raise InputDomainError("prices are nonnegative")


@dataclass(frozen=True)
class ListingUpdate:
    """New availability and/or nightly prices for some days of one listing.

    ``seq`` is the listing's own counter and must strictly increase.
    """

    listing_id: ListingId
    seq: int
    days: tuple[DayChange, ...]

    def __post_init__(self) -> None:
        if not self.days:
            raise InputDomainError("update changes nothing")

    def to_record(self) -> dict:
        return {
            "type": "listing_update",
            "listing_id": self.listing_id,
            "seq": self.seq,
            "days": [[d.day, d.available, d.price] for d in self.days],
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> ListingUpdate:
        if rec.get("type") != "listing_update":
            raise InputDomainError(f"not a listing_update record: {rec.get('type')!r}")
        days = tuple(DayChange(int(d), a, None if p is None else int(p))
                     for d, a, p in rec["days"])
        return cls(int(rec["listing_id"]), int(rec["seq"]), days)


class StaleUpdateError(ValueError):
    """A listing update whose sequence number does not advance the listing's."""

    def __init__(self, listing_id: ListingId, seq: int, last: int):
        super().__init__(f"listing {listing_id}: update seq {seq} <= last applied {last}")
        self.listing_id = listing_id
        self.seq = seq
        self.last = last


def _run_end_rows(available: np.ndarray) -> np.ndarray:
    n, horizon = available.shape
    blocked_at = np.where(available, horizon, np.arange(horizon))
    out = np.empty((n, horizon + 1), dtype=np.int16)
    out[:, horizon] = horizon
    out[:, :horizon] = np.minimum.accumulate(blocked_at[:, ::-1], axis=1)[:, ::-1]
    return out


def _prefix_rows(prices: np.ndarray) -> np.ndarray:
    out = np.zeros((prices.shape[0], prices.shape[1] + 1), dtype=np.int64)
    np.cumsum(prices, axis=1, out=out[:, 1:])
    return out


def _last_slots(version_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct rows among the versions and the slot of each row's newest version."""
    j = version_rows.shape[0]
    rows, first = np.unique(version_rows[::-1], return_index=True)
    return rows, j - 1 - first


class _Generation:
    """Immutable base arrays plus an append-only buffer of row versions.

    Slot ``j`` of the buffer holds the full calendar row written by one
    update. Slots below the published count are never touched again, so a
    reader may use them without locking.
    """

    def __init__(self, bits: np.ndarray, prices: np.ndarray, base_seq: int, horizon: int,
                 capacity: int, run_end: np.ndarray | None = None,
                 prefix: np.ndarray | None = None):
        for a in (bits, prices, run_end, prefix):
            if a is not None:
                a.setflags(write=False)
        self.bits = bits
        self.prices = prices
        self.base_seq = base_seq
        self.horizon = horizon
        self.capacity = capacity
        self._run_end = run_end
        self._prefix = prefix
        self._lock = threading.Lock()
        self.v_row = np.empty(capacity, dtype=np.int64)
        self.v_seq = np.empty(capacity, dtype=np.int64)
        self.v_bits = np.empty((capacity, bits.shape[1]), dtype=np.uint8)
        self.v_prices = np.empty((capacity, horizon), dtype=np.int32)
        self.v_run_end = np.empty((capacity, horizon + 1), dtype=np.int16)
        self.v_prefix = np.empty((capacity, horizon + 1), dtype=np.int64)
        self.latest: dict[int, int] = {}  # writer-side: row -> newest slot

    def run_end(self) -> np.ndarray:
        if self._run_end is None:
            with self._lock:
                if self._run_end is None:
                    avail = np.unpackbits(self.bits, axis=1, count=self.horizon).astype(bool)
                    table = _run_end_rows(avail)
                    table.setflags(write=False)
                    self._run_end = table
        return self._run_end

    def prefix(self) -> np.ndarray:
        if self._prefix is None:
            with self._lock:
                if self._prefix is None:
                    table = _prefix_rows(self.prices)
                    table.setflags(write=False)
                    self._prefix = table
        return self._prefix

    def write(self, slot: int, row: int, seq: int, avail: np.ndarray, prices: np.ndarray
              ) -> None:
        self.v_row[slot] = row
        self.v_seq[slot] = seq
        self.v_bits[slot] = np.packbits(avail)
        self.v_prices[slot] = prices
        self.v_run_end[slot] = _run_end_rows(avail[None, :])[0]
        self.v_prefix[slot] = _prefix_rows(prices[None, :])[0]
        self.latest[row] = slot


class CalendarSnapshot:
    """A read view pinned to one acknowledged sequence number."""

    def __init__(self, store: CalendarStore, gen: _Generation, seq: int, count: int):
        self.store = store
        self._gen = gen
        self.seq = seq
        self._count = count
        self._index: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def horizon(self) -> int:
        return self._gen.horizon

    def slots(self, rows: np.ndarray) -> np.ndarray:
        """Version slot holding each row's state, or -1 when the base row is current."""
        rows = np.asarray(rows, dtype=np.int64)
        if self._count == 0:
            return np.full(rows.shape, -1, dtype=np.int64)
        if self._index is None:
            self._index = _last_slots(self._gen.v_row[:self._count])
        dirty, last = self._index
        pos = np.minimum(np.searchsorted(dirty, rows), dirty.shape[0] - 1)
        return np.where(dirty[pos] == rows, last[pos], -1)

    def row_state(self, row: int) -> tuple[np.ndarray, np.ndarray]:
        """(available bool[D], prices int[D]) of one listing row."""
        slot = int(self.slots(np.array([row]))[0])
        g = self._gen
        bits, prices = (g.bits[row], g.prices[row]) if slot < 0 else (g.v_bits[slot],
                                                                       g.v_prices[slot])
        return np.unpackbits(bits, count=self.horizon).astype(bool), prices.copy()

    def row_tables(self, row: int) -> tuple[np.ndarray, np.ndarray]:
        """(run_end[D + 1], prefix[D + 1]) of one listing row."""
        slot = int(self.slots(np.array([row]))[0])
        g = self._gen
        if slot < 0:
            return g.run_end()[row], g.prefix()[row]
        return g.v_run_end[slot], g.v_prefix[slot]

    def gather(self, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """run_end and prefix at ``cols`` for many rows, as [len(rows), len(cols)]."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        g = self._gen
        re = g.run_end()[rows[:, None], cols[None, :]].astype(np.int64)
        px = g.prefix()[rows[:, None], cols[None, :]]
        slots = self.slots(rows)
        hit = np.flatnonzero(slots >= 0)
        if hit.size:
            s = slots[hit]
            re[hit] = g.v_run_end[s[:, None], cols[None, :]]
            px[hit] = g.v_prefix[s[:, None], cols[None, :]]
        return re, px

    def feasible_mask(self, rows: np.ndarray, combos: Sequence[DateCombo],
                      nightly_range: tuple[int, int] | None = None) -> np.ndarray:
        """Rows with at least one feasible combo (whose mean nightly price is in range)."""
        rows = np.asarray(rows, dtype=np.int64)
        mask = np.zeros(rows.shape[0], dtype=bool)
        if rows.shape[0] == 0 or not combos:
            return mask
        for c in combos:
            _check_combo(c, self.horizon)
        starts = np.array([c.checkin for c in combos])
        ends = np.array([c.checkout for c in combos])
        cols, inv = np.unique(np.concatenate([starts, ends]), return_inverse=True)
        si, ei = inv[:len(combos)], inv[len(combos):]
        re, px = self.gather(rows, cols)
        ok = re[:, si] >= ends[None, :]
        if nightly_range is not None:
            lo, hi = nightly_range
            nights = (ends - starts)[None, :]
            total = px[:, ei] - px[:, si]
            ok &= (total >= lo * nights) & (total <= hi * nights)
        return ok.any(axis=1)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """(available [n, D], prices [n, D]) as of this snapshot."""
        g = self._gen
        avail = np.unpackbits(g.bits, axis=1, count=self.horizon).astype(bool)
        prices = g.prices.copy()
        slots = self.slots(np.arange(g.bits.shape[0]))
        hit = np.flatnonzero(slots >= 0)
        if hit.size:
            avail[hit] = np.unpackbits(g.v_bits[slots[hit]], axis=1, count=self.horizon
                                       ).astype(bool)
            prices[hit] = g.v_prices[slots[hit]]
        return avail, prices


def _check_combo(combo: DateCombo, horizon: int) -> None:
    if combo.checkout > horizon:
        raise InputDomainError(
            f"stay {combo.checkin}+{combo.nights} runs past the {horizon}-day horizon")


class CalendarStore:
    """Single-writer, many-reader store of per-listing calendars.

    ``versions_per_generation`` bounds the version buffer; when it fills, the
    writer folds the newest version of every row into fresh base arrays.
    """

    def __init__(self, ids: np.ndarray, available: np.ndarray, prices: np.ndarray,
                 versions_per_generation: int = 8192):
        ids = np.asarray(ids, dtype=np.int64)
        available = np.asarray(available, dtype=bool)
        prices = np.asarray(prices)
        if available.ndim != 2 or available.shape != prices.shape:
            raise InputDomainError("availability and prices must both be [listings, horizon]")
        if available.shape[0] != ids.shape[0]:
            raise InputDomainError("one calendar row per listing id required")
        if np.any(np.diff(ids) <= 0):
            raise InputDomainError("listing ids must be strictly increasing")
        if np.any(prices < 0):
            raise InputDomainError("prices are nonnegative")
        if prices.max(initial=0) > np.iinfo(np.int32).max:
            raise InputDomainError("nightly price exceeds int32 cents")
        if versions_per_generation < 1:
            raise InputDomainError("versions_per_generation must be positive")
        self.ids = ids.copy()
        self.ids.setflags(write=False)
        self.horizon = available.shape[1]
        if not 1 <= self.horizon <= np.iinfo(np.int16).max:
            raise InputDomainError("horizon out of range")
        self._last_seq = np.zeros(ids.shape[0], dtype=np.int64)
        self._write_lock = threading.Lock()
        self._capacity = versions_per_generation
        gen = _Generation(np.packbits(available, axis=1), prices.astype(np.int32), 0,
                          self.horizon, self._capacity)
        self._state: tuple[_Generation, int, int] = (gen, 0, 0)
        self.generations = 1

    @classmethod
    def from_world(cls, world, **kw) -> CalendarStore:
        return cls(world.ids, world.calendar_available, world.calendar_prices, **kw)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def acked_seq(self) -> int:
        return self._state[1]

    def row_of(self, listing_id: ListingId) -> int:
        i = int(np.searchsorted(self.ids, listing_id))
        if i >= self.ids.shape[0] or self.ids[i] != listing_id:
            raise KeyError(f"unknown listing id {listing_id}")
        return i

    def rows_of(self, listing_ids) -> np.ndarray:
        ids = np.asarray(listing_ids, dtype=np.int64)
        pos = np.clip(np.searchsorted(self.ids, ids), 0, max(len(self.ids) - 1, 0))
        if ids.size and np.any(self.ids[pos] != ids):
            raise KeyError("unknown listing id")
        return pos

    def last_seq(self, listing_id: ListingId) -> int:
        return int(self._last_seq[self.row_of(listing_id)])

    def snapshot(self) -> CalendarSnapshot:
        gen, seq, count = self._state
        return CalendarSnapshot(self, gen, seq, count)

    # -- writer side ----------------------------------------------------------------

    def apply(self, update: ListingUpdate) -> int:
        """Apply one update and return the store-wide sequence number acknowledging it."""
        row = self.row_of(update.listing_id)
        for ch in update.days:
            if not 0 <= ch.day < self.horizon:
                raise InputDomainError(f"day {ch.day} outside horizon {self.horizon}")
        with self._write_lock:
            last = int(self._last_seq[row])
            if update.seq <= last:
                raise StaleUpdateError(update.listing_id, update.seq, last)
            gen, seq, count = self._state
            if count == gen.capacity:
                self._compact()
                gen, seq, count = self._state
            slot = gen.latest.get(row)
            if slot is None:
                avail = np.unpackbits(gen.bits[row], count=self.horizon).astype(bool)
                prices = gen.prices[row].copy()
            else:
                avail = np.unpackbits(gen.v_bits[slot], count=self.horizon).astype(bool)
                prices = gen.v_prices[slot].copy()
            for ch in update.days:
                if ch.available is not None:
                    avail[ch.day] = ch.available
                if ch.price is not None:
                    prices[ch.day] = ch.price
            seq += 1
            gen.write(count, row, seq, avail, prices)
            self._last_seq[row] = update.seq
            # Publishing the new triple is the acknowledgement.
            self._state = (gen, seq, count + 1)
            return seq

    def _compact(self) -> None:
        gen, seq, count = self._state
        run_end = gen.run_end().copy()
        prefix = gen.prefix().copy()
        bits = gen.bits.copy()
        prices = gen.prices.copy()
        if count:
            rows, slots = _last_slots(gen.v_row[:count])
            bits[rows] = gen.v_bits[slots]
            prices[rows] = gen.v_prices[slots]
            run_end[rows] = gen.v_run_end[slots]
            prefix[rows] = gen.v_prefix[slots]
        fresh = _Generation(bits, prices, seq, self.horizon, self._capacity, run_end, prefix)
        self._state = (fresh, seq, 0)
        self.generations += 1

    def compact(self) -> None:
        with self._write_lock:
            self._compact()

    # -- accounting and export ------------------------------------------------------

    def memory_bytes(self) -> dict[str, int]:
        """Bytes of the core per-listing storage (derived caches excluded)."""
        n = len(self)
        bits = n * ((self.horizon + 7) // 8)
        prices = n * self.horizon * 4
        seqs = n * 8
        return {"availability_bits": bits, "prices": prices, "sequence_numbers": seqs,
                "total": bits + prices + seqs, "per_listing": (bits + prices + seqs) // max(n, 1)}

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Materialize the latest acknowledged state as (available, prices) arrays."""
        return self.snapshot().dense()


def _view(store: CalendarStore | CalendarSnapshot) -> CalendarSnapshot:
    return store.snapshot() if isinstance(store, CalendarStore) else store


def stay_feasible(store: CalendarStore | CalendarSnapshot, listing_id: ListingId,
                  combo: DateCombo) -> int | None:
    """Total price in cents if every night of the stay is open, else ``None``.

    Reads the raw bits and prices night by night; this is the reference the
    table-driven paths are checked against.
    """
    snap = _view(store)
    _check_combo(combo, snap.horizon)
    avail, prices = snap.row_state(snap.store.row_of(listing_id))
    total = 0
    for d in range(combo.checkin, combo.checkout):
        if not avail[d]:
            return None
        total += int(prices[d])
    return total


def flexible_feasible_set(store: CalendarStore | CalendarSnapshot, listing_id: ListingId,
                          combos: Iterable[DateCombo]) -> dict[DateCombo, int]:
    """Feasible combos with their totals, from one lookup of the listing's tables."""
    snap = _view(store)
    run_end, prefix = snap.row_tables(snap.store.row_of(listing_id))
    out: dict[DateCombo, int] = {}
    for c in combos:
        _check_combo(c, snap.horizon)
        if run_end[c.checkin] >= c.checkout:
            out[c] = int(prefix[c.checkout] - prefix[c.checkin])
    return out


def apply_calendar_update(store: CalendarStore, listing_id: ListingId, day: int,
                          available: bool | None = None, price: int | None = None) -> int:
    """Change one night of one listing; returns the acknowledging sequence number."""
    if not 0 <= day < store.horizon:
        raise InputDomainError(f"day {day} outside horizon {store.horizon}")
    seq = store.last_seq(listing_id) + 1
    return store.apply(ListingUpdate(listing_id, seq, (DayChange(day, available, price),)))


def save_calendar(path: str | Path, store: CalendarStore) -> None:
    avail, prices = store.dense()
    write_bundle(path, "calendar", {"horizon": store.horizon, "acked_seq": store.acked_seq},
                 {"ids": store.ids, "bits": np.packbits(avail, axis=1), "prices": prices,
                  "last_seq": store._last_seq})


def load_calendar(path: str | Path) -> CalendarStore:
    header, arrays = read_bundle(path, "calendar")
    horizon = int(header["horizon"])
    avail = np.unpackbits(arrays["bits"], axis=1, count=horizon).astype(bool)
    store = CalendarStore(arrays["ids"], avail, arrays["prices"])
    store._last_seq[:] = arrays["last_seq"]
    gen, _, _ = store._state
    acked = int(header["acked_seq"])
    gen.base_seq = acked
    store._state = (gen, acked, 0)
    return store


__all__ = [
    "DEFAULT_HORIZON", "MAX_FLEX_DAYS", "CalendarSnapshot", "CalendarStore", "DateCombo",
    "DayChange", "ListingUpdate", "StaleUpdateError", "apply_calendar_update",
    "enumerate_combos", "flexible_feasible_set", "load_calendar", "save_calendar",
    "stay_feasible",
]
