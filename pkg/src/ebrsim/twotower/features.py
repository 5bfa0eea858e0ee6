"""Feature extraction for the two towers.

Each tower consumes a dense float block plus integer indices into learned
embedding tables. Query features stay small on purpose (they are computed
per request); listing features only use data available to a daily batch job.

The optional location block appends fine coordinates to both towers: the
viewport center for a query and the exact position for a listing. Cell ids
alone are too coarse to tell listings inside one neighbourhood apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..domain import NUM_AMENITIES, RESOLUTIONS, InputDomainError, PlaceId, Query

NUM_LOS_BUCKETS = 4
QUERY_DENSE_WIDTH = 2 + NUM_LOS_BUCKETS
LISTING_DENSE_WIDTH = 4 + NUM_AMENITIES + 2
LOCATION_FREQUENCIES = (1.0, 4.0, 16.0)
LOCATION_WIDTH = 4 * len(LOCATION_FREQUENCIES)
CELL_VOCAB = tuple(4 ** r for r in RESOLUTIONS)


@dataclass(frozen=True)
class FeatureBatch:
    """Dense block [n, width] and one index column per embedding table [n, tables]."""

    dense: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return self.dense.shape[0]

    def take(self, rows) -> FeatureBatch:
        return FeatureBatch(self.dense[rows], self.indices[rows])


def _los_bucket(nights: np.ndarray) -> np.ndarray:
    return np.select([nights <= 2, nights <= 5, nights <= 13], [0, 1, 2], default=3)


def _location(lat_lon: np.ndarray) -> np.ndarray:
    """Multi-scale periodic encoding: sin and cos of each coordinate per frequency."""
    x = np.asarray(lat_lon, dtype=np.float64).reshape(-1, 2)
    parts = []
    for f in LOCATION_FREQUENCIES:
        parts += [np.sin(2.0 * np.pi * f * x), np.cos(2.0 * np.pi * f * x)]
    return np.concatenate(parts, axis=1)


def query_features(queries: Sequence[Query], place_index: dict[PlaceId, int],
                   location: bool = False) -> FeatureBatch:
    n = len(queries)
    guests = np.array([q.num_guests for q in queries], dtype=np.float64)
    area = np.array([q.search_area for q in queries], dtype=np.float64)
    nights = np.array([q.nights for q in queries], dtype=np.int64)
    try:
        places = np.array([place_index[q.place_id] for q in queries], dtype=np.int64)
    except KeyError as e:
        raise InputDomainError(f"unknown place id {e.args[0]}") from None
    dense = np.zeros((n, QUERY_DENSE_WIDTH + (LOCATION_WIDTH if location else 0)))
    dense[:, 0] = np.clip((guests - 3.0) / 2.0, -5.0, 5.0)
    dense[:, 1] = np.clip((np.log(area) + 4.0) / 1.5, -5.0, 5.0)
    dense[np.arange(n), 2 + _los_bucket(nights)] = 1.0
    if location:
        centers = [q.map_bounds.center if q.map_bounds is not None
                   else q.location_cell.bounds().center for q in queries]
        dense[:, QUERY_DENSE_WIDTH:] = _location(np.array(centers).reshape(n, 2))
    return FeatureBatch(dense, places[:, None])


def listing_features_from_columns(engagement: np.ndarray, amenities: np.ndarray,
                                  capacity: np.ndarray, base_price: np.ndarray,
                                  cell_indices: np.ndarray,
                                  lat_lon: np.ndarray | None = None) -> FeatureBatch:
    n = engagement.shape[0]
    dense = np.zeros((n, LISTING_DENSE_WIDTH + (LOCATION_WIDTH if lat_lon is not None else 0)))
    dense[:, :4] = np.log1p(engagement.astype(np.float64)) / 4.0
    bits = (amenities[:, None] >> np.arange(NUM_AMENITIES, dtype=np.int64)) & 1
    dense[:, 4:4 + NUM_AMENITIES] = bits
    dense[:, 4 + NUM_AMENITIES] = (capacity - 3.0) / 3.0
    dense[:, 5 + NUM_AMENITIES] = (np.log(np.maximum(base_price, 1.0)) - 4.6) / 0.5
    if lat_lon is not None:
        dense[:, LISTING_DENSE_WIDTH:] = _location(lat_lon)
    return FeatureBatch(dense, np.asarray(cell_indices, dtype=np.int64).copy())


def listing_features(world, location: bool = False) -> FeatureBatch:
    """Features for every listing of a world, in row order."""
    return listing_features_from_columns(world.engagement, world.amenities, world.capacity,
                                         world.base_price, world.cell_indices,
                                         world.lat_lon if location else None)

