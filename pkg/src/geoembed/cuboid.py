"""Rotated neighbor grids and geographic data cuboids.

A location's cuboid is built by spanning a grid_size x grid_size grid of
neighbor coordinates around it (unit grid, scaled by spacing, rotated by a
random angle, translated to the center), locating each neighbor's region,
and stacking the regions' attribute vectors into a grid_size x grid_size x d
array (row-major spatial, channel-last). The located region ids are cached
so cuboids can be replayed bit-exactly without geometry lookups.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geodata import MISSING, AttributeTable, Coordinate, RegionIndex, attribute_vector

#: Pass as the angle to draw it from the seeded RNG instead.
SAMPLE = None


@dataclass(frozen=True)
class GridParams:
    spacing: float = 100.0
    grid_size: int = 16
    rng_seed: int = 0

    def __post_init__(self):
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")


@dataclass(frozen=True)
class NeighborGrid:
    center: Coordinate
    angle_deg: float
    grid_size: int
    points: tuple[Coordinate, ...]


def unit_grid(grid_size: int) -> list[Coordinate]:
    """Grid of unit-width cell centers around the origin, row-major.

    Rows run top to bottom (y descending), columns left to right
    (x ascending). For even sizes the origin itself is not a grid point.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    p = grid_size
    return [
        ((2 * c - p + 1) / 2, (p - 1 - 2 * r) / 2)
        for r in range(p)
        for c in range(p)
    ]


def angle_for_location(rng_seed: int, ordinal: int, resample_round: int = 0) -> float:
    """Deterministic per-location rotation angle, uniform on [0, 360).

    The RNG is split per location (seed XOR ordinal) so serial and parallel
    builds agree. Angles are fixed per location within a run; bumping
    resample_round draws a fresh set without touching the base seed.
    """
    seed = rng_seed ^ (resample_round * 0x9E3779B1)
    rng = np.random.default_rng(seed ^ ordinal)
    return float(rng.uniform(0.0, 360.0))


def make_grid(
    params: GridParams,
    center: Coordinate,
    angle_deg: float | None = SAMPLE,
    ordinal: int = 0,
) -> NeighborGrid:
    """Scale, rotate, and translate the unit grid to a location."""
    if angle_deg is SAMPLE:
        angle_deg = angle_for_location(params.rng_seed, ordinal)
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    w = params.spacing
    cx, cy = center
    points = tuple(
        (w * (cos_t * ux - sin_t * uy) + cx, w * (sin_t * ux + cos_t * uy) + cy)
        for ux, uy in unit_grid(params.grid_size)
    )
    return NeighborGrid(center=center, angle_deg=float(angle_deg),
                        grid_size=params.grid_size, points=points)


def build_cuboid(
    grid: NeighborGrid,
    index: RegionIndex,
    table: AttributeTable,
) -> tuple[np.ndarray, list[str]]:
    """Fill the cuboid cell (r, c, :) from the region containing point r*p+c.

    Returns the grid_size x grid_size x d array and the located region ids
    (row-major, MISSING where the point falls in no region).
    """
    p = grid.grid_size
    ids = [index.lookup(pt) for pt in grid.points]
    return cuboid_from_ids(ids, p, table), ids


def cuboid_from_ids(ids: list[str], grid_size: int, table: AttributeTable) -> np.ndarray:
    p = grid_size
    cuboid = np.empty((p, p, table.d))
    for i, rid in enumerate(ids):
        r, c = divmod(i, p)
        cuboid[r, c, :] = attribute_vector(table, rid)
    return cuboid


@dataclass
class CuboidIndexCache:
    """location_id -> (rotation angle, row-major region ids)."""

    grid_size: int
    entries: dict[str, tuple[float, tuple[str, ...]]] = field(default_factory=dict)

    def add(self, location_id: str, angle_deg: float, ids: list[str]) -> None:
        if len(ids) != self.grid_size**2:
            raise ValueError(
                f"{location_id}: expected {self.grid_size**2} ids, got {len(ids)}"
            )
        self.entries[location_id] = (float(angle_deg), tuple(ids))


def build_cuboids(
    locations: list[tuple[str, Coordinate]],
    params: GridParams,
    index: RegionIndex,
    table: AttributeTable,
    resample_round: int = 0,
) -> tuple[dict[str, np.ndarray], CuboidIndexCache]:
    """Cuboids plus replayable cache for every location, deterministically.

    Angles are fixed per location for the run: the same seed and location
    order always yield the same angles and cuboids.
    """
    cache = CuboidIndexCache(grid_size=params.grid_size)
    cuboids: dict[str, np.ndarray] = {}
    for ordinal, (location_id, center) in enumerate(locations):
        angle = angle_for_location(params.rng_seed, ordinal, resample_round)
        grid = make_grid(params, center, angle)
        cuboid, ids = build_cuboid(grid, index, table)
        cache.add(location_id, grid.angle_deg, ids)
        cuboids[location_id] = cuboid
    return cuboids, cache


def replay_cache(cache: CuboidIndexCache, table: AttributeTable) -> dict[str, np.ndarray]:
    """Rebuild every cached cuboid from the table alone (bit-exact)."""
    return {
        location_id: cuboid_from_ids(list(ids), cache.grid_size, table)
        for location_id, (_, ids) in cache.entries.items()
    }


def write_cache(cache: CuboidIndexCache, path) -> None:
    """One row per location: location_id, angle_deg, then grid_size**2 ids."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for location_id, (angle, ids) in cache.entries.items():
            writer.writerow([location_id, repr(angle), *ids])


def read_cache(path, grid_size: int) -> CuboidIndexCache:
    cache = CuboidIndexCache(grid_size=grid_size)
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            cache.add(row[0], float(row[1]), row[2:])
    return cache
