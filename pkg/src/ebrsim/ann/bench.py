"""Load test for the update path: one paced writer, several paced readers.

Readers record every result together with the snapshot it was computed
against. After the run an independent checker rebuilds each returned
listing's calendar by replaying the logged updates up to that snapshot's
sequence number onto the initial calendar, and re-evaluates the filter night
by night. Any returned listing that fails is a soundness violation.

Read-your-writes is probed separately: close a night on a listing, search
for a stay covering it, reopen, search again.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import asdict, dataclass

import numpy as np

from ..domain import Rect
from ..flexdate import DateCombo, DayChange, ListingUpdate, StaleUpdateError
from .ivf import AttributeStore, Filter, IvfIndex, brute_force_knn, ivf_search

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchReport:
    target_update_rate: float
    target_qps: float
    duration: float
    updates_applied: int
    update_rate: float  # updates handled (applied or rejected stale) per second of writer time
    stale_rejected: int
    update_backlog: int  # offered but not yet handled when the writer stopped
    queries: int
    qps: float
    latency_p50_ms: float
    latency_p99_ms: float
    rows_checked: int
    soundness_violations: int
    ryw_probes: int
    ryw_failures: int

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def ok(self) -> bool:
        return self.soundness_violations == 0 and self.ryw_failures == 0


def naive_match(a: AttributeStore, row: int, flt: Filter, avail: np.ndarray,
                prices: np.ndarray) -> bool:
    """Filter check of one row against an explicit calendar row, night by night."""
    if flt.map_bounds is not None:
        lat, lon = a.lat_lon[row]
        if not flt.map_bounds.contains(float(lat), float(lon)):
            return False
    if flt.near is not None:
        lat, lon = a.lat_lon[row]
        if not np.hypot(lat - flt.near[0], lon - flt.near[1]) <= flt.near[2]:
            return False
    if flt.cell is not None and a.cell_indices[row, flt.cell.resolution] != flt.cell.cell_index:
        return False
    if flt.min_capacity is not None and a.capacity[row] < flt.min_capacity:
        return False
    if flt.amenity_mask and (int(a.amenities[row]) & flt.amenity_mask) != flt.amenity_mask:
        return False
    if flt.stay is None:
        if flt.price_range is None:
            return True
        return flt.price_range[0] <= int(prices[0]) <= flt.price_range[1]
    for c in flt.combos(avail.shape[0]):
        if all(avail[c.checkin:c.checkout]):
            if flt.price_range is None:
                return True
            total = int(prices[c.checkin:c.checkout].sum())
            if flt.price_range[0] * c.nights <= total <= flt.price_range[1] * c.nights:
                return True
    return False


class _ReplayOracle:
    """Calendar state of any row at any acknowledged sequence number, by replay."""

    def __init__(self, available: np.ndarray, prices: np.ndarray):
        self.available = available
        self.prices = prices
        self.log: dict[int, list[tuple[int, tuple[DayChange, ...]]]] = {}

    def record(self, row: int, ack: int, days: tuple[DayChange, ...]) -> None:
        self.log.setdefault(row, []).append((ack, days))

    def state(self, row: int, seq: int) -> tuple[np.ndarray, np.ndarray]:
        avail = self.available[row].copy()
        prices = self.prices[row].copy()
        for ack, days in self.log.get(row, ()):
            if ack > seq:
                break
            for ch in days:
                if ch.available is not None:
                    avail[ch.day] = ch.available
                if ch.price is not None:
                    prices[ch.day] = ch.price
        return avail, prices


def random_filter(index: IvfIndex, rng: np.random.Generator) -> Filter:
    a = index.attributes
    horizon = a.calendar.horizon
    center = a.lat_lon[int(rng.integers(len(a)))]
    half = float(rng.uniform(0.05, 0.25))
    bounds = Rect.around(float(center[0]), float(center[1]), half)
    nights = int(rng.integers(1, 8))
    checkin = int(rng.integers(0, horizon - nights - 3))
    flex = int(rng.integers(0, 4)) if rng.random() < 0.3 else 0
    price = None
    if rng.random() < 0.3:
        lo = int(rng.integers(5_000, 15_000))
        price = (lo, lo + int(rng.integers(2_000, 20_000)))
    return Filter(map_bounds=bounds, min_capacity=int(rng.integers(1, 5)), price_range=price,
                  stay=DateCombo(checkin, nights), flex_days=flex)


def _probe_ryw(index: IvfIndex, next_seq: dict, oracle: _ReplayOracle, lock: threading.Lock,
               rng: np.random.Generator) -> bool:
    """Close a night, check the listing disappears; reopen, check it returns."""
    a = index.attributes
    cal = a.calendar
    row = int(rng.integers(len(a)))
    lid = int(a.ids[row])
    day = int(rng.integers(0, cal.horizon - 1))
    lat, lon = a.lat_lon[row]
    flt = Filter(map_bounds=Rect.around(float(lat), float(lon), 1e-9),
                 stay=DateCombo(day, 1))
    q = index.table.vectors[row]
    ok = True
    for value in (False, True):
        with lock:
            seq = next_seq.get(lid, cal.last_seq(lid)) + 1
            days = (DayChange(day, available=value),)
            ack = cal.apply(ListingUpdate(lid, seq, days))
            next_seq[lid] = seq
            oracle.record(row, ack, days)
        res = ivf_search(index, q, index.k, flt, top_k=len(a))
        ok &= (lid in res.ids) == value
        ok &= res.snapshot_seq >= ack
        ref = brute_force_knn(index.table, q, flt, len(a), a)
        ok &= (lid in ref.ids) == value
    return ok


def run_update_bench(index: IvfIndex, update_rate: float = 10_000.0, duration: float = 10.0,
                     qps: float = 100.0, readers: int = 4, nprobes: int = 16, top_k: int = 100,
                     ryw_probes: int = 20, seed: int = 0) -> BenchReport:
    a = index.attributes
    cal = a.calendar
    avail0, prices0 = cal.dense()
    oracle = _ReplayOracle(avail0, prices0)
    next_seq: dict[int, int] = {}
    writer_lock = threading.Lock()  # serializes the bench writer with the probes
    stop = threading.Event()
    results: list[tuple[int, Filter, np.ndarray]] = []
    latencies: list[float] = []
    counters = {"applied": 0, "stale": 0, "window": 0.0, "backlog": 0}
    reader_windows = [0.0] * readers
    reader_issued = [0] * readers
    n = len(a)
    horizon = cal.horizon

    def writer() -> None:
        rng = np.random.default_rng([seed, 1])
        t0 = time.perf_counter()
        done = 0
        while True:
            now = time.perf_counter()
            due = math.ceil((now - t0) * update_rate)
            if stop.is_set():
                counters["backlog"] = max(0, due - done)
                break
            if done >= due:
                time.sleep(0.0005)
                continue
            batch = min(due - done, 500)
            # The rate is measured up to the moment the last handled batch fell due.
            counters["window"] = now - t0
            rows = rng.integers(n, size=batch)
            days = rng.integers(horizon, size=batch)
            flips = rng.random(batch) < 0.5
            prices = rng.integers(5_000, 40_000, size=batch)
            stale = rng.random(batch) < 0.001
            for i in range(batch):
                row = int(rows[i])
                lid = int(a.ids[row])
                if flips[i]:
                    ch = (DayChange(int(days[i]), available=bool(rng.random() < 0.5)),)
                else:
                    ch = (DayChange(int(days[i]), price=int(prices[i])),)
                with writer_lock:
                    last = next_seq.get(lid, 0)
                    seq = last if stale[i] and last > 0 else last + 1
                    try:
                        ack = cal.apply(ListingUpdate(lid, seq, ch))
                    except StaleUpdateError:
                        counters["stale"] += 1
                        continue
                    next_seq[lid] = seq
                    oracle.record(row, ack, ch)
                counters["applied"] += 1
            done += batch

    def reader(k: int) -> None:
        rng = np.random.default_rng([seed, 2, k])
        rate = qps / readers
        t0 = time.perf_counter()
        issued = 0
        while not stop.is_set():
            now = time.perf_counter()
            due = math.ceil((now - t0) * rate)
            if issued >= due:
                time.sleep(0.001)
                continue
            reader_windows[k] = now - t0
            flt = random_filter(index, rng)
            q = index.table.vectors[int(rng.integers(n))]
            t = time.perf_counter()
            snap = a.snapshot()
            res = ivf_search(index, q, nprobes, flt, top_k, snapshot=snap)
            latencies.append(time.perf_counter() - t)
            results.append((snap.seq, flt, res.rows.copy()))
            issued += 1
            reader_issued[k] = issued

    threads = [threading.Thread(target=writer, daemon=True)]
    threads += [threading.Thread(target=reader, args=(k,), daemon=True) for k in range(readers)]
    start = time.perf_counter()
    for t in threads:
        t.start()
    time.sleep(duration)
    stop.set()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - start

    rng = np.random.default_rng([seed, 3])
    ryw_fail = sum(not _probe_ryw(index, next_seq, oracle, writer_lock, rng)
                   for _ in range(ryw_probes))

    violations = 0
    checked = 0
    for seq, flt, rows in results:
        for row in rows:
            avail, prices = oracle.state(int(row), seq)
            checked += 1
            if not naive_match(a, int(row), flt, avail, prices):
                violations += 1
    lat = np.array(latencies) * 1e3 if latencies else np.zeros(1)
    report = BenchReport(
        target_update_rate=update_rate, target_qps=qps, duration=elapsed,
        updates_applied=counters["applied"],
        update_rate=(counters["applied"] + counters["stale"]) / max(counters["window"], 1e-9),
        stale_rejected=counters["stale"], update_backlog=counters["backlog"],
        queries=len(results),
        qps=sum(i / w for i, w in zip(reader_issued, reader_windows) if w > 0),
        latency_p50_ms=float(np.percentile(lat, 50)), latency_p99_ms=float(np.percentile(lat, 99)),
        rows_checked=checked, soundness_violations=violations, ryw_probes=ryw_probes,
        ryw_failures=int(ryw_fail))
    log.info("update bench: %s", report)
    return report
