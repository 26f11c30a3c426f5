import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoembed import geodata
from geoembed.geodata import (
    MISSING,
    AttributeTable,
    GeometryInvalid,
    KeyMismatch,
    LambertParams,
    NormalizationSpec,
    PoleInput,
    PolygonRegion,
    RegionIndex,
    UnknownRegion,
    attribute_vector,
    ingest_regions,
    inverse_lambert,
    locate,
    normalize,
    project_lambert,
)

from conftest import square, write_csv, write_geojson


# ---------------------------------------------------------------------------
# Ingest


def test_ingest_identity(three_squares):
    geo, attrs = three_squares
    regions, table = ingest_regions(geo, attrs, excluded_columns=[])
    assert len(regions) == 3
    assert table.d == 3
    assert len(table.rows) == 3


def test_ingest_key_mismatch_lists_orphan(tmp_path):
    geo = write_geojson(tmp_path / "g.geojson", [square("A", 0, 0), square("B", 1, 0), square("C", 2, 0)])
    attrs = write_csv(tmp_path / "a.csv", ["region_id", "pop"], [["A", 1], ["B", 2]])
    with pytest.raises(KeyMismatch) as err:
        ingest_regions(geo, attrs)
    assert "C" in str(err.value)


def test_ingest_excluded_column(tmp_path):
    geo = write_geojson(tmp_path / "g.geojson", [square("A", 0, 0)])
    attrs = write_csv(
        tmp_path / "a.csv",
        ["region_id", "pop", "income", "age", "mother_tongue", "commute"],
        [["A", 1, 2, 3, 4, 5]],
    )
    _, table = ingest_regions(geo, attrs, excluded_columns=["mother_tongue"])
    assert table.d == 4
    assert "mother_tongue" not in table.columns


def test_ingest_excluded_column_must_exist(tmp_path):
    geo = write_geojson(tmp_path / "g.geojson", [square("A", 0, 0)])
    attrs = write_csv(tmp_path / "a.csv", ["region_id", "pop"], [["A", 1]])
    with pytest.raises(KeyError):
        ingest_regions(geo, attrs, excluded_columns=["nope"])


def test_open_ring_rejected():
    ring = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))  # not closed
    with pytest.raises(GeometryInvalid):
        PolygonRegion("bad", (ring,))


def test_short_ring_rejected():
    with pytest.raises(GeometryInvalid):
        PolygonRegion("bad", (((0.0, 0.0), (1.0, 0.0), (0.0, 0.0)),))


def test_self_intersecting_outer_ring_rejected():
    bowtie = ((0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0), (0.0, 0.0))
    with pytest.raises(GeometryInvalid):
        PolygonRegion("bowtie", (bowtie,))


# ---------------------------------------------------------------------------
# Normalization


def _table(cols, data):
    return AttributeTable(columns=cols, rows={k: np.array(v, dtype=float) for k, v in data.items()})


def test_minmax_linear_map():
    table = _table(["x"], {"A": [2.0], "B": [4.0], "C": [6.0]})
    out, _ = normalize(table, {"x": NormalizationSpec("minmax_global")})
    assert [out.rows[k][0] for k in "ABC"] == [0.0, 0.5, 1.0]


def test_share_of_region_total():
    table = _table(["kids", "pop"], {"A": [30.0, 60.0]})
    specs = {
        "kids": NormalizationSpec("share_of_region_total", denominator_column="pop"),
        "pop": NormalizationSpec("minmax_global"),
    }
    out, _ = normalize(table, specs)
    assert out.rows["A"][0] == 0.5


def test_degenerate_column_reported_not_fatal():
    table = _table(["x"], {"A": [7.0], "B": [7.0], "C": [7.0]})
    out, report = normalize(table, {"x": NormalizationSpec("minmax_global")})
    assert report.degenerate_columns == ["x"]
    assert all(out.rows[k][0] == 0.0 for k in "ABC")


def test_nonpositive_denominator_flags_row_missing():
    table = _table(["kids", "pop"], {"A": [3.0, 0.0], "B": [3.0, 6.0]})
    specs = {
        "kids": NormalizationSpec("share_of_region_total", denominator_column="pop"),
        "pop": NormalizationSpec("minmax_global"),
    }
    out, report = normalize(table, specs)
    assert report.flagged_missing == ["A"]
    assert np.all(out.rows["A"] == 0.0)
    assert attribute_vector(out, "A").tolist() == [0.0, 0.0]


def test_minmax_idempotent():
    table = _table(["x"], {"A": [2.0], "B": [4.0], "C": [6.0]})
    specs = {"x": NormalizationSpec("minmax_global")}
    once, _ = normalize(table, specs)
    twice, _ = normalize(once, specs)
    for k in "ABC":
        assert twice.rows[k][0] == once.rows[k][0]


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=2, max_size=20))
def test_minmax_lands_in_unit_interval(values):
    table = _table(["x"], {f"R{i}": [v] for i, v in enumerate(values)})
    out, _ = normalize(table, {"x": NormalizationSpec("minmax_global")})
    for row in out.rows.values():
        assert 0.0 <= row[0] <= 1.0


# ---------------------------------------------------------------------------
# Locate


def test_locate_interior_point():
    index = RegionIndex([square("A", 0, 0)])
    assert locate(index, (0.5, 0.5)) == "A"


def test_locate_outside_all_regions():
    index = RegionIndex([square("A", 0, 0)])
    assert locate(index, (2.0, 2.0)) == MISSING


def test_locate_shared_edge_lexicographic_tiebreak():
    regions = [square("B", 1, 0), square("A", 0, 0)]
    index = RegionIndex(regions)
    # (1.0, 0.5) lies on the edge shared by A and B.
    assert locate(index, (1.0, 0.5)) == "A"
    # Brute-force even-odd scan over all regions, smallest id first.
    containing = sorted(r.region_id for r in regions if r.contains(1.0, 0.5))
    assert containing[0] == "A"


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_locate_matches_bruteforce_scan(data):
    n = data.draw(st.integers(min_value=1, max_value=8))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    regions = []
    for i in range(n):
        x0, y0 = rng.uniform(-5, 5, size=2)
        w, h = rng.uniform(0.5, 4, size=2)
        ring = ((x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h), (x0, y0))
        regions.append(PolygonRegion(f"R{i:02d}", (ring,)))
    index = RegionIndex(regions)
    for _ in range(30):
        pt = tuple(rng.uniform(-6, 10, size=2))
        want = MISSING
        for r in sorted(regions, key=lambda r: r.region_id):
            if r.contains(*pt):
                want = r.region_id
                break
        assert locate(index, pt) == want


def test_attribute_vector_missing_is_zero(normalized_table):
    assert attribute_vector(normalized_table, MISSING).tolist() == [0.0] * 4


def test_attribute_vector_known_row(normalized_table):
    assert attribute_vector(normalized_table, "A").tolist() == [0.0, 0.25, 1.0, 0.5]


def test_attribute_vector_unknown_region(normalized_table):
    with pytest.raises(UnknownRegion):
        attribute_vector(normalized_table, "ZZZ")


@given(st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_attribute_vector_range(seed):
    rng = np.random.default_rng(seed)
    raw = _table(["x", "y"], {f"R{i}": rng.uniform(-50, 50, size=2) for i in range(5)})
    out, _ = normalize(raw, {c: NormalizationSpec("minmax_global") for c in raw.columns})
    for rid in list(out.rows) + [MISSING]:
        v = attribute_vector(out, rid)
        assert np.all(v >= 0.0) and np.all(v <= 1.0)


# ---------------------------------------------------------------------------
# Lambert projection


PARAMS = LambertParams(
    parallel1_deg=46.0, parallel2_deg=60.0, origin_lon_deg=-68.5, origin_lat_deg=44.0
)


def test_projection_origin_maps_to_zero():
    x, y = project_lambert(PARAMS.origin_lon_deg, PARAMS.origin_lat_deg, PARAMS)
    assert abs(x) < 1e-9 and abs(y) < 1e-9


@pytest.mark.parametrize(
    "params,lon_range,lat_range",
    [
        (PARAMS, (-120, -20), (20, 75)),
        # Southern hemisphere cone (n < 0).
        (LambertParams(-30.0, -50.0, 135.0, -40.0), (100, 170), (-65, -10)),
    ],
)
def test_projection_round_trip(params, lon_range, lat_range):
    rng = np.random.default_rng(0)
    for _ in range(50):
        lon = float(rng.uniform(*lon_range))
        lat = float(rng.uniform(*lat_range))
        x, y = project_lambert(lon, lat, params)
        lon2, lat2 = inverse_lambert(x, y, params)
        assert abs(lon - lon2) < 1e-6 and abs(lat - lat2) < 1e-6
        x2, y2 = project_lambert(lon2, lat2, params)
        assert math.hypot(x - x2, y - y2) < 1e-6


def test_projection_degree_of_latitude_near_origin():
    a = project_lambert(-68.5, 44.0, PARAMS)
    b = project_lambert(-68.5, 45.0, PARAMS)
    dist = math.hypot(a[0] - b[0], a[1] - b[1])
    assert abs(dist - 111_195.0) / 111_195.0 < 0.005


def test_false_easting_northing_offset():
    shifted = LambertParams(46.0, 60.0, -68.5, 44.0, false_easting=1000.0, false_northing=-500.0)
    x, y = project_lambert(-68.5, 44.0, shifted)
    assert abs(x - 1000.0) < 1e-9 and abs(y + 500.0) < 1e-9


def test_pole_input_rejected():
    with pytest.raises(PoleInput):
        project_lambert(10.0, 90.0, PARAMS)


def test_equal_parallels_rejected():
    with pytest.raises(ValueError):
        LambertParams(46.0, 46.0, -68.5, 44.0)
