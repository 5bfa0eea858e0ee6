import oracles
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ebrsim.domain import (
    ActionCategory,
    Engagement,
    GeoCell,
    InputDomainError,
    Listing,
    Query,
    Rect,
    cell_contains,
    geo_cell,
    listing_from_record,
    listing_to_record,
    query_from_record,
    query_to_record,
)

unit = st.floats(0.0, 1.0, allow_nan=False)
res = st.integers(0, 3)


@pytest.mark.parametrize("lat, lon, r, expected", [
    (0.0, 0.0, 0, 0),
    (0.6, 0.3, 1, 2),
    (1.0, 1.0, 2, 15),
])
def test_geo_cell_examples(lat, lon, r, expected):
    assert geo_cell(lat, lon, r).cell_index == expected


@pytest.mark.parametrize("args", [(-0.1, 0.5, 1), (0.5, 1.01, 1), (0.5, 0.5, 4), (0.5, 0.5, -1)])
def test_geo_cell_rejects_out_of_domain(args):
    with pytest.raises(InputDomainError):
        geo_cell(*args)


@given(unit, unit, res)
def test_geo_cell_matches_band_scan(lat, lon, r):
    assert geo_cell(lat, lon, r).cell_index == oracles.cell_index(lat, lon, r)


@given(unit, unit, res)
def test_cell_bounds_contain_point(lat, lon, r):
    assert geo_cell(lat, lon, r).bounds().contains(lat, lon)


def test_cell_contains_examples():
    c = GeoCell(2, 5)
    assert cell_contains(c, c)
    assert all(cell_contains(GeoCell(0, 0), GeoCell(2, i)) for i in range(16))
    assert not cell_contains(GeoCell(1, 0), GeoCell(2, 15))
    with pytest.raises(InputDomainError):
        cell_contains(GeoCell(2, 0), GeoCell(1, 0))


@given(unit, unit, res)
def test_exactly_one_parent_per_coarser_resolution(lat, lon, r):
    child = geo_cell(lat, lon, r)
    for p in range(r + 1):
        parents = [GeoCell(p, i) for i in range(4 ** p) if cell_contains(GeoCell(p, i), child)]
        assert parents == [geo_cell(lat, lon, p)]


def test_geocell_validation():
    with pytest.raises(InputDomainError):
        GeoCell(1, 4)
    with pytest.raises(InputDomainError):
        GeoCell(4, 0)


def test_action_order():
    assert ActionCategory.IMPRESSED < ActionCategory.VIEWED < ActionCategory.WISHLISTED \
        < ActionCategory.BOOKED


def test_rect_requires_positive_area():
    with pytest.raises(InputDomainError):
        Rect(0.2, 0.2, 0.0, 1.0)
    r = Rect.around(0.05, 0.5, 0.1)
    assert r.lat_min == 0.0 and r.area > 0


def _listing(**kw):
    base = dict(id=5, lat_lon=(0.3, 0.7), cells=tuple(geo_cell(0.3, 0.7, r) for r in range(4)),
                capacity=4, amenities=0b1011, quality_latent=(0.1,) * 8,
                engagement=Engagement(10, 2, 1, 1), base_price=99.5)
    base.update(kw)
    return Listing(**base)


def test_listing_invariants():
    with pytest.raises(InputDomainError):
        _listing(cells=tuple(geo_cell(0.9, 0.9, r) for r in range(4)))
    with pytest.raises(InputDomainError):
        _listing(capacity=17)
    with pytest.raises(InputDomainError):
        Engagement(-1, 0, 0, 0)
    assert _listing().has_amenity(1) and not _listing().has_amenity(2)


def test_query_invariants():
    cell = GeoCell(2, 3)
    with pytest.raises(InputDomainError):
        Query(1, cell, 2, 0, 0)
    with pytest.raises(InputDomainError):
        Query(1, cell, 2, 0, 3, flex_days=8)
    assert Query(1, cell, 2, 0, 3).search_area == pytest.approx(1 / 16)


def test_records_round_trip():
    lst = _listing()
    assert listing_from_record(listing_to_record(lst)) == lst
    q = Query(7, GeoCell(2, 3), 2, 10, 3, Rect(0.1, 0.2, 0.3, 0.5), 2, (0.5,) * 8)
    assert query_from_record(query_to_record(q)) == q
    with pytest.raises(InputDomainError):
        query_from_record({"type": "listing"})
