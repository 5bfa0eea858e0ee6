"""Core value types shared across the package.

Geography lives on the unit square. A power-of-two grid stands in for a real
hierarchical cell system: resolution ``r`` splits each axis into ``2**r``
bands, so a cell is addressed by ``row * 2**r + col``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Any

ListingId = int
UserId = int
PlaceId = int

MAX_RESOLUTION = 3
RESOLUTIONS = tuple(range(MAX_RESOLUTION + 1))
NUM_AMENITIES = 32
LATENT_DIM = 8
MAX_FLEX_DAYS = 7


class InputDomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ActionCategory(IntEnum):
    """User actions on an impressed listing, ordered by intent."""

    IMPRESSED = 0
    VIEWED = 1
    WISHLISTED = 2
    BOOKED = 3


@dataclass(frozen=True, order=True)
class GeoCell:
    resolution: int
    cell_index: int

    def __post_init__(self) -> None:
        if not 0 <= self.resolution <= MAX_RESOLUTION:
            raise InputDomainError(f"resolution {self.resolution} outside 0..{MAX_RESOLUTION}")
        side = 1 << self.resolution
        if not 0 <= self.cell_index < side * side:
            raise InputDomainError(
                f"cell_index {self.cell_index} outside grid of {side * side} cells"
            )

    @property
    def side(self) -> int:
        return 1 << self.resolution

    @property
    def row(self) -> int:
        return self.cell_index // self.side

    @property
    def col(self) -> int:
        return self.cell_index % self.side

    @property
    def area(self) -> float:
        return 1.0 / (self.side * self.side)

    def bounds(self) -> Rect:
        w = 1.0 / self.side
        return Rect(self.row * w, (self.row + 1) * w, self.col * w, (self.col + 1) * w)

    def parent(self, resolution: int) -> GeoCell:
        """The unique ancestor at a coarser (or equal) resolution."""
        if resolution > self.resolution:
            raise InputDomainError("parent resolution must not exceed the cell's own")
        shift = self.resolution - resolution
        return GeoCell(resolution, (self.row >> shift) * (1 << resolution) + (self.col >> shift))


def _band(x: float, side: int) -> int:
    return min(int(math.floor(x * side)), side - 1)


def geo_cell(lat: float, lon: float, resolution: int) -> GeoCell:
    """Grid cell containing ``(lat, lon)``; points on the 1.0 edge fall in the last band."""
    if not (0.0 <= lat <= 1.0 and 0.0 <= lon <= 1.0):
        raise InputDomainError(f"coordinates ({lat}, {lon}) outside the unit square")
    if not 0 <= resolution <= MAX_RESOLUTION:
        raise InputDomainError(f"resolution {resolution} outside 0..{MAX_RESOLUTION}")
    side = 1 << resolution
    return GeoCell(resolution, _band(lat, side) * side + _band(lon, side))


def cell_contains(parent: GeoCell, child: GeoCell) -> bool:
    if parent.resolution > child.resolution:
        raise InputDomainError("parent resolution exceeds child resolution")
    return child.parent(parent.resolution) == parent


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle ``[lat_min, lat_max] x [lon_min, lon_max]``."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self) -> None:
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise InputDomainError("rectangle must have positive area")

    @property
    def area(self) -> float:
        return (self.lat_max - self.lat_min) * (self.lon_max - self.lon_min)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.lat_min + self.lat_max), 0.5 * (self.lon_min + self.lon_max))

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max

    @classmethod
    def around(cls, lat: float, lon: float, half_width: float) -> Rect:
        """Square of the given half width, clipped to the unit square."""
        return cls(
            max(0.0, lat - half_width),
            min(1.0, lat + half_width),
            max(0.0, lon - half_width),
            min(1.0, lon + half_width),
        )


@dataclass(frozen=True)
class Engagement:
    views: int = 0
    wishlists: int = 0
    bookings: int = 0
    reviews: int = 0

    def __post_init__(self) -> None:
        if min(self.views, self.wishlists, self.bookings, self.reviews) < 0:
            raise InputDomainError("engagement counters must be nonnegative")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.views, self.wishlists, self.bookings, self.reviews)


@dataclass(frozen=True)
class Listing:
    id: ListingId
    lat_lon: tuple[float, float]
    cells: tuple[GeoCell, ...]
    capacity: int
    amenities: int
    quality_latent: tuple[float, ...]
    engagement: Engagement
    base_price: float

    def __post_init__(self) -> None:
        if not 1 <= self.capacity <= 16:
            raise InputDomainError(f"capacity {self.capacity} outside 1..16")
        if not 0 <= self.amenities < (1 << NUM_AMENITIES):
            raise InputDomainError("amenity bitset wider than 32 flags")
        if len(self.cells) != len(RESOLUTIONS):
            raise InputDomainError("one cell per resolution required")
        for r, c in enumerate(self.cells):
            if c != geo_cell(self.lat_lon[0], self.lat_lon[1], r):
                raise InputDomainError(f"cell at resolution {r} does not contain lat_lon")

    @property
    def lat(self) -> float:
        return self.lat_lon[0]

    @property
    def lon(self) -> float:
        return self.lat_lon[1]

    def has_amenity(self, flag: int) -> bool:
        return bool(self.amenities >> flag & 1)


@dataclass(frozen=True)
class Query:
    place_id: PlaceId
    location_cell: GeoCell
    num_guests: int
    checkin: int
    nights: int
    map_bounds: Rect | None = None
    flex_days: int = 0
    guest_latent: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.nights < 1:
            raise InputDomainError("nights must be at least 1")
        if not 0 <= self.flex_days <= MAX_FLEX_DAYS:
            raise InputDomainError(f"flex_days must lie in 0..{MAX_FLEX_DAYS}")
        if self.num_guests < 1:
            raise InputDomainError("num_guests must be at least 1")
        if self.checkin < 0:
            raise InputDomainError("checkin day index must be nonnegative")

    @property
    def search_area(self) -> float:
        return self.map_bounds.area if self.map_bounds is not None else self.location_cell.area


# -- line-delimited record serialization ----------------------------------------------


def _cell_record(cell: GeoCell) -> list[int]:
    return [cell.resolution, cell.cell_index]


def _rect_record(rect: Rect | None) -> list[float] | None:
    if rect is None:
        return None
    return [rect.lat_min, rect.lat_max, rect.lon_min, rect.lon_max]


def listing_to_record(listing: Listing) -> dict[str, Any]:
    return {
        "type": "listing",
        "id": listing.id,
        "lat_lon": list(listing.lat_lon),
        "cells": [_cell_record(c) for c in listing.cells],
        "capacity": listing.capacity,
        "amenities": listing.amenities,
        "quality_latent": list(listing.quality_latent),
        "engagement": list(listing.engagement.as_tuple()),
        "base_price": listing.base_price,
    }


def listing_from_record(rec: dict[str, Any]) -> Listing:
    if rec.get("type") != "listing":
        raise InputDomainError(f"expected a listing record, got {rec.get('type')!r}")
    return Listing(
        id=int(rec["id"]),
        lat_lon=(float(rec["lat_lon"][0]), float(rec["lat_lon"][1])),
        cells=tuple(GeoCell(int(r), int(i)) for r, i in rec["cells"]),
        capacity=int(rec["capacity"]),
        amenities=int(rec["amenities"]),
        quality_latent=tuple(float(x) for x in rec["quality_latent"]),
        engagement=Engagement(*(int(x) for x in rec["engagement"])),
        base_price=float(rec["base_price"]),
    )


def query_to_record(query: Query) -> dict[str, Any]:
    return {
        "type": "query",
        "place_id": query.place_id,
        "location_cell": _cell_record(query.location_cell),
        "map_bounds": _rect_record(query.map_bounds),
        "num_guests": query.num_guests,
        "checkin": query.checkin,
        "nights": query.nights,
        "flex_days": query.flex_days,
        "guest_latent": list(query.guest_latent),
    }


def query_from_record(rec: dict[str, Any]) -> Query:
    if rec.get("type") != "query":
        raise InputDomainError(f"expected a query record, got {rec.get('type')!r}")
    bounds = rec.get("map_bounds")
    return Query(
        place_id=int(rec["place_id"]),
        location_cell=GeoCell(*(int(x) for x in rec["location_cell"])),
        map_bounds=Rect(*(float(x) for x in bounds)) if bounds is not None else None,
        num_guests=int(rec["num_guests"]),
        checkin=int(rec["checkin"]),
        nights=int(rec["nights"]),
        flex_days=int(rec.get("flex_days", 0)),
        guest_latent=tuple(float(x) for x in rec.get("guest_latent", ())),
    )
