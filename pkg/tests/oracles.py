"""Independent slow implementations used as test oracles.

Each one is written from the operation's contract, in plain Python, without
reusing the code path it checks.
"""

from __future__ import annotations

import math


def cell_index(lat: float, lon: float, resolution: int) -> int:
    """Band search by scanning grid lines."""
    side = 2 ** resolution

    def band(x: float) -> int:
        for i in range(side):
            if i / side <= x < (i + 1) / side:
                return i
        return side - 1  # x == 1.0

    return band(lat) * side + band(lon)


def combos(checkin: int, nights: int, flex: int, horizon: int | None = None) -> set:
    """Every (checkin, nights) reachable by independent shifts, by search over the grid."""
    out = set()
    lo = max(0, checkin - flex)
    top = checkin + nights + flex + 1
    for ci in range(lo, checkin + flex + 1):
        for n in range(1, top - ci + 1):
            if horizon is not None and ci + n > horizon:
                continue
            for dk in range(-flex, flex + 1):
                if max(1, checkin + nights + dk - ci) == n:
                    out.add((ci, n))
                    break
    return out


def stay_total(avail, prices, checkin: int, nights: int):
    total = 0
    for d in range(checkin, checkin + nights):
        if not bool(avail[d]):
            return None
        total += int(prices[d])
    return total


def quadratic_knn(ids, vectors, q, top_k: int, similarity: str, keep=None):
    """Score every row with math.fsum, sort by (-score, id)."""
    scored = []
    for i, (lid, v) in enumerate(zip(ids, vectors)):
        if keep is not None and not keep[i]:
            continue
        if similarity == "dot":
            s = math.fsum(float(a) * float(b) for a, b in zip(q, v))
        else:
            s = -math.sqrt(math.fsum((float(a) - float(b)) ** 2 for a, b in zip(q, v)))
        scored.append((-s, int(lid)))
    scored.sort()
    return [lid for _, lid in scored[:top_k]], [-s for s, _ in scored[:top_k]]


def relevance(world, query, row: int) -> float:
    """Ground-truth relevance of one listing, from the world's record objects."""
    listing = world.listings[row]
    place = next(p for p in world.places if p.id == query.place_id)
    aff = math.fsum(a * b for a, b in zip(listing.quality_latent, query.guest_latent))
    aff /= math.sqrt(len(listing.quality_latent))
    d = math.hypot(listing.lat - place.center[0], listing.lon - place.center[1])
    cfg = world.config
    raw = aff - cfg.geo_weight * d / place.radius \
        - cfg.capacity_weight * abs(listing.capacity - query.num_guests)
    raw = max(-1e3, min(1e3, raw))
    return raw - 1e4 if listing.capacity < query.num_guests else raw


def finite_difference_grads(loss_fn, params: dict, eps: float = 1e-6, max_entries: int = 40,
                            rng=None):
    """Central differences on up to ``max_entries`` entries of each parameter tensor."""
    out = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        picks = range(flat.size) if flat.size <= max_entries else \
            rng.choice(flat.size, size=max_entries, replace=False)
        g = {}
        for j in picks:
            old = flat[j]
            flat[j] = old + eps
            up = loss_fn()
            flat[j] = old - eps
            down = loss_fn()
            flat[j] = old
            g[int(j)] = (up - down) / (2 * eps)
        out[name] = g
    return out


def filter_match(a, row, flt, avail, prices):
    """Filter predicate built only from the functions above."""
    lat, lon = (float(v) for v in a.lat_lon[row])
    if flt.map_bounds is not None:
        r = flt.map_bounds
        if not (r.lat_min <= lat <= r.lat_max and r.lon_min <= lon <= r.lon_max):
            return False
    if flt.near is not None and ((lat - flt.near[0]) ** 2 + (lon - flt.near[1]) ** 2) ** 0.5 \
            > flt.near[2]:
        return False
    if flt.cell is not None and \
            cell_index(lat, lon, flt.cell.resolution) != flt.cell.cell_index:
        return False
    if flt.min_capacity is not None and int(a.capacity[row]) < flt.min_capacity:
        return False
    if int(a.amenities[row]) & flt.amenity_mask != flt.amenity_mask:
        return False
    if flt.stay is None:
        return flt.price_range is None or flt.price_range[0] <= prices[0] <= flt.price_range[1]
    for c, n in combos(flt.stay.checkin, flt.stay.nights, flt.flex_days, len(avail)):
        total = stay_total(avail, prices, c, n)
        if total is not None and (flt.price_range is None
                                  or flt.price_range[0] * n <= total <= flt.price_range[1] * n):
            return True
    return False
