import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoembed.cuboid import (
    SAMPLE,
    CuboidIndexCache,
    GridParams,
    angle_for_location,
    build_cuboid,
    build_cuboids,
    make_grid,
    read_cache,
    replay_cache,
    unit_grid,
    write_cache,
)
from geoembed.geodata import (
    MISSING,
    AttributeTable,
    PolygonRegion,
    RegionIndex,
    UnknownRegion,
)

from conftest import square


def test_unit_grid_p2_point_set():
    points = set(unit_grid(2))
    assert points == {(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)}


def test_unit_grid_odd_size_contains_center():
    assert (0.0, 0.0) in unit_grid(3)


def test_unit_grid_p4_formula_and_symmetry():
    # Independent enumeration of the defining formula.
    p = 4
    want = {((2 * k - p + 1) / 2, (2 * j - p + 1) / 2) for k in range(p) for j in range(p)}
    got = unit_grid(4)
    assert len(got) == 16
    assert set(got) == want
    assert all(x * 2 == int(x * 2) and y * 2 == int(y * 2) for x, y in got)
    assert {(-x, -y) for x, y in got} == set(got)


def test_unit_grid_even_size_excludes_center():
    assert (0.0, 0.0) not in unit_grid(16)


def test_grid_distances_match_published_configuration():
    grid = make_grid(GridParams(spacing=100.0, grid_size=16), (0.0, 0.0), angle_deg=37.0)
    dists = sorted(math.hypot(x, y) for x, y in grid.points)
    assert abs(dists[0] - 70.7107) < 0.01
    assert abs(dists[-1] - 1060.660) < 0.01
    assert len(grid.points) == 256


def test_grid_translation_no_rotation():
    grid = make_grid(GridParams(spacing=1.0, grid_size=2), (10.0, 10.0), angle_deg=0.0)
    assert set((round(x, 12), round(y, 12)) for x, y in grid.points) == {
        (9.5, 9.5), (9.5, 10.5), (10.5, 9.5), (10.5, 10.5)
    }


def test_grid_quarter_turn_permutes_point_set():
    params = GridParams(spacing=3.0, grid_size=4)
    a = make_grid(params, (5.0, -2.0), angle_deg=0.0)
    b = make_grid(params, (5.0, -2.0), angle_deg=90.0)
    ra = {(round(x, 9), round(y, 9)) for x, y in a.points}
    rb = {(round(x, 9), round(y, 9)) for x, y in b.points}
    assert ra == rb
    assert a.points != b.points  # order permuted


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.0, max_value=359.999), st.integers(2, 8).filter(lambda p: p % 2 == 0))
def test_distance_spectrum_rotation_invariant(theta, p):
    params = GridParams(spacing=2.5, grid_size=p)
    base = make_grid(params, (0.0, 0.0), angle_deg=0.0)
    rot = make_grid(params, (0.0, 0.0), angle_deg=theta)
    d0 = sorted(math.hypot(x, y) for x, y in base.points)
    d1 = sorted(math.hypot(x, y) for x, y in rot.points)
    assert np.allclose(d0, d1, rtol=1e-9)
    assert abs(d0[0] - params.spacing / math.sqrt(2)) < 1e-9
    assert abs(d0[-1] - params.spacing * (p - 1) / math.sqrt(2)) < 1e-9


def _one_region_world():
    region = square("Z", -10, -10, size=20.0)
    table = AttributeTable(
        columns=["a", "b"], rows={"Z": np.array([0.25, 0.75])}, normalized=True
    )
    return RegionIndex([region]), table


def test_cuboid_constant_field():
    index, table = _one_region_world()
    grid = make_grid(GridParams(spacing=1.0, grid_size=4), (0.0, 0.0), angle_deg=123.0)
    cuboid, ids = build_cuboid(grid, index, table)
    assert cuboid.shape == (4, 4, 2)
    assert np.all(cuboid[:, :, 0] == 0.25) and np.all(cuboid[:, :, 1] == 0.75)
    assert ids == ["Z"] * 16


def test_cuboid_two_halfplane_regions():
    def strip(rid, x0, x1):
        ring = ((x0, -100.0), (x1, -100.0), (x1, 100.0), (x0, 100.0), (x0, -100.0))
        return PolygonRegion(rid, (ring,))

    left = strip("A", -100.0, 0.0)
    right = strip("B", 0.0, 100.0)
    index = RegionIndex([left, right])
    table = AttributeTable(
        columns=["v"],
        rows={"A": np.array([0.2]), "B": np.array([0.9])},
        normalized=True,
    )
    grid = make_grid(GridParams(spacing=2.0, grid_size=4), (0.0, 0.0), angle_deg=0.0)
    cuboid, ids = build_cuboid(grid, index, table)
    # Brute-force locate per point governs the expectation.
    for i, (x, y) in enumerate(grid.points):
        r, c = divmod(i, 4)
        want = 0.2 if left.contains(x, y) else 0.9
        assert cuboid[r, c, 0] == want
    # Left columns carry A's value, right columns B's.
    assert np.all(cuboid[:, :2, 0] == 0.2) and np.all(cuboid[:, 2:, 0] == 0.9)


def test_cuboid_over_water_is_zero():
    index, table = _one_region_world()
    grid = make_grid(GridParams(spacing=1.0, grid_size=4), (500.0, 500.0), angle_deg=0.0)
    cuboid, ids = build_cuboid(grid, index, table)
    assert np.all(cuboid == 0.0)
    assert set(ids) == {MISSING}


def test_cache_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    regions = [square(f"R{i}", float(3 * (i % 4)), float(3 * (i // 4)), size=3.0) for i in range(8)]
    index = RegionIndex(regions)
    table = AttributeTable(
        columns=["a", "b", "c"],
        rows={r.region_id: rng.uniform(size=3) for r in regions},
        normalized=True,
    )
    locations = [(f"L{i}", tuple(rng.uniform(0, 9, size=2))) for i in range(10)]
    params = GridParams(spacing=1.3, grid_size=4, rng_seed=9)
    cuboids, cache = build_cuboids(locations, params, index, table)

    path = tmp_path / "cache.csv"
    write_cache(cache, path)
    replayed = replay_cache(read_cache(path, grid_size=4), table)
    assert set(replayed) == set(cuboids)
    for lid in cuboids:
        assert np.array_equal(replayed[lid], cuboids[lid])


def test_cache_unknown_region_errors():
    cache = CuboidIndexCache(grid_size=2)
    cache.add("L0", 10.0, ["GHOST"] * 4)
    table = AttributeTable(columns=["a"], rows={"A": np.array([0.5])}, normalized=True)
    with pytest.raises(UnknownRegion):
        replay_cache(cache, table)


def test_empty_cache_replays_to_empty():
    cache = CuboidIndexCache(grid_size=4)
    table = AttributeTable(columns=["a"], rows={}, normalized=True)
    assert replay_cache(cache, table) == {}


def test_deterministic_angles_and_resampling():
    assert angle_for_location(42, 7) == angle_for_location(42, 7)
    assert angle_for_location(42, 7) != angle_for_location(42, 8)
    assert angle_for_location(42, 7, resample_round=1) != angle_for_location(42, 7)
    a = make_grid(GridParams(spacing=1.0, grid_size=2, rng_seed=5), (0.0, 0.0), SAMPLE, ordinal=3)
    b = make_grid(GridParams(spacing=1.0, grid_size=2, rng_seed=5), (0.0, 0.0), SAMPLE, ordinal=3)
    assert a.angle_deg == b.angle_deg
    assert 0.0 <= a.angle_deg < 360.0


def test_build_cuboids_deterministic():
    index, table = _one_region_world()
    locations = [(f"L{i}", (float(i), 0.0)) for i in range(5)]
    params = GridParams(spacing=0.5, grid_size=4, rng_seed=11)
    c1, cache1 = build_cuboids(locations, params, index, table)
    c2, cache2 = build_cuboids(locations, params, index, table)
    assert cache1.entries == cache2.entries
    for lid in c1:
        assert np.array_equal(c1[lid], c2[lid])


def test_row_major_order_contract():
    # Four quadrant regions with distinct values; cell (r, c) must equal the
    # region containing points[r*p + c].
    regions = [
        square("NW", -2, 0, 2.0), square("NE", 0, 0, 2.0),
        square("SW", -2, -2, 2.0), square("SE", 0, -2, 2.0),
    ]
    index = RegionIndex(regions)
    table = AttributeTable(
        columns=["v"],
        rows={"NW": np.array([0.1]), "NE": np.array([0.2]),
              "SW": np.array([0.3]), "SE": np.array([0.4])},
        normalized=True,
    )
    grid = make_grid(GridParams(spacing=1.0, grid_size=2), (0.0, 0.0), angle_deg=0.0)
    cuboid, ids = build_cuboid(grid, index, table)
    for i, pt in enumerate(grid.points):
        r, c = divmod(i, 2)
        assert cuboid[r, c, 0] == table.rows[index.lookup(pt)][0]
    # Row 0 is the top of the grid (larger y), column 0 the left.
    assert cuboid[0, 0, 0] == 0.1 and cuboid[0, 1, 0] == 0.2
    assert cuboid[1, 0, 0] == 0.3 and cuboid[1, 1, 0] == 0.4
