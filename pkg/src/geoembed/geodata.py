"""Polygon regions, attribute tables, normalization, and point-in-region lookup.

Regions arrive as a GeoJSON-style feature collection (one Polygon feature per
region, carrying a "region_id" property), attributes as delimited text with a
header row whose first column is "region_id". All coordinates are planar
meters in a shared projection; a spherical Lambert conformal conic is
provided for inputs that arrive in degrees.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

Coordinate = tuple[float, float]

#: Sentinel region id for coordinates contained in no region (e.g. water).
MISSING = "__MISSING__"

NORMALIZATION_KINDS = ("minmax_global", "share_of_region_total", "identity")


class GeometryInvalid(ValueError):
    """Ring is open, too short, or the outer boundary self-intersects."""


class KeyMismatch(KeyError):
    """Attribute rows and region geometries do not cover each other."""


class UnknownRegion(KeyError):
    """A region id that is neither MISSING nor present in the table."""


class PoleInput(ValueError):
    """Latitude at (or beyond) a pole cannot be projected."""


# ---------------------------------------------------------------------------
# Geometry


@dataclass(frozen=True)
class PolygonRegion:
    """A polygon with an outer boundary and optional holes.

    Rings are closed (first point repeated last) and hold at least 4 points.
    """

    region_id: str
    rings: tuple[tuple[Coordinate, ...], ...]
    bbox: tuple[float, float, float, float] = field(init=False)

    def __post_init__(self):
        if not self.rings:
            raise GeometryInvalid(f"region {self.region_id!r}: no rings")
        for ring in self.rings:
            if len(ring) < 4:
                raise GeometryInvalid(
                    f"region {self.region_id!r}: ring with {len(ring)} points (need >= 4)"
                )
            if ring[0] != ring[-1]:
                raise GeometryInvalid(f"region {self.region_id!r}: open ring")
        if _ring_self_intersects(self.rings[0]):
            raise GeometryInvalid(
                f"region {self.region_id!r}: outer ring self-intersects"
            )
        xs = [p[0] for ring in self.rings for p in ring]
        ys = [p[1] for ring in self.rings for p in ring]
        object.__setattr__(self, "bbox", (min(xs), min(ys), max(xs), max(ys)))

    def contains(self, x: float, y: float) -> bool:
        """Even-odd containment; boundary points count as inside."""
        x0, y0, x1, y1 = self.bbox
        if x < x0 or x > x1 or y < y0 or y > y1:
            return False
        inside = False
        for ring in self.rings:
            for i in range(len(ring) - 1):
                ax, ay = ring[i]
                bx, by = ring[i + 1]
                if _on_segment(x, y, ax, ay, bx, by):
                    return True
                if (ay > y) != (by > y):
                    x_cross = ax + (y - ay) * (bx - ax) / (by - ay)
                    if x < x_cross:
                        inside = not inside
        return inside


def _on_segment(x, y, ax, ay, bx, by) -> bool:
    if x < min(ax, bx) or x > max(ax, bx) or y < min(ay, by) or y > max(ay, by):
        return False
    return (bx - ax) * (y - ay) - (by - ay) * (x - ax) == 0.0


def _segments_cross(p, q, r, s) -> bool:
    # Proper or touching intersection of segments pq and rs.
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return int(v > 0) - int(v < 0)

    o1, o2 = orient(p, q, r), orient(p, q, s)
    o3, o4 = orient(r, s, p), orient(r, s, q)
    if o1 != o2 and o3 != o4:
        return True
    for a, b, c, o in ((p, q, r, o1), (p, q, s, o2), (r, s, p, o3), (r, s, q, o4)):
        if o == 0 and _on_segment(c[0], c[1], a[0], a[1], b[0], b[1]):
            return True
    return False


def _ring_self_intersects(ring) -> bool:
    n = len(ring) - 1  # closed: last point repeats the first
    for i in range(n):
        for j in range(i + 1, n):
            # Skip adjacent edges (they share an endpoint by construction).
            if j == i or j == (i + 1) % n or (j + 1) % n == i:
                continue
            if _segments_cross(ring[i], ring[i + 1], ring[j], ring[j + 1]):
                return True
    return False


class RegionIndex:
    """Uniform-grid acceleration over region bboxes.

    Candidates within a cell are kept sorted by region_id so boundary points
    shared by several regions always resolve to the lexicographically
    smallest id.
    """

    def __init__(self, regions: list[PolygonRegion]):
        self.regions = {r.region_id: r for r in sorted(regions, key=lambda r: r.region_id)}
        if len(self.regions) != len(regions):
            dupes = sorted({r.region_id for r in regions if sum(s.region_id == r.region_id for s in regions) > 1})
            raise GeometryInvalid(f"duplicate region ids: {dupes}")
        if regions:
            self._x0 = min(r.bbox[0] for r in regions)
            self._y0 = min(r.bbox[1] for r in regions)
            x1 = max(r.bbox[2] for r in regions)
            y1 = max(r.bbox[3] for r in regions)
            self._n = max(1, int(math.isqrt(len(regions))))
            self._dx = max((x1 - self._x0) / self._n, 1e-12)
            self._dy = max((y1 - self._y0) / self._n, 1e-12)
            self._cells: dict[tuple[int, int], list[PolygonRegion]] = {}
            for region in self.regions.values():
                bx0, by0, bx1, by1 = region.bbox
                for ci in range(self._cell_x(bx0), self._cell_x(bx1) + 1):
                    for cj in range(self._cell_y(by0), self._cell_y(by1) + 1):
                        self._cells.setdefault((ci, cj), []).append(region)
        else:
            self._cells = {}

    def _cell_x(self, x: float) -> int:
        return min(self._n - 1, max(0, int((x - self._x0) / self._dx)))

    def _cell_y(self, y: float) -> int:
        return min(self._n - 1, max(0, int((y - self._y0) / self._dy)))

    def lookup(self, c: Coordinate) -> str:
        if not self._cells:
            return MISSING
        x, y = c
        for region in self._cells.get((self._cell_x(x), self._cell_y(y)), ()):
            if region.contains(x, y):
                return region.region_id
        return MISSING


def locate(index: RegionIndex, c: Coordinate) -> str:
    """Id of the region containing c, or MISSING. Boundary ties go to the
    smallest region_id."""
    return index.lookup(c)


# ---------------------------------------------------------------------------
# Attributes


@dataclass(frozen=True)
class NormalizationSpec:
    kind: str
    denominator_column: str | None = None

    def __post_init__(self):
        if self.kind not in NORMALIZATION_KINDS:
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        if self.kind == "share_of_region_total" and not self.denominator_column:
            raise ValueError("share_of_region_total needs a denominator_column")


@dataclass
class AttributeTable:
    """region_id -> d-vector of variables, plus normalization state."""

    columns: list[str]
    rows: dict[str, np.ndarray]
    normalized: bool = False
    missing_ids: frozenset[str] = frozenset()
    column_stats: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def d(self) -> int:
        return len(self.columns)

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([self.rows[rid][j] for rid in self.rows])


@dataclass
class NormalizationReport:
    degenerate_columns: list[str] = field(default_factory=list)
    clamped_columns: list[str] = field(default_factory=list)
    flagged_missing: list[str] = field(default_factory=list)


def normalize(
    table: AttributeTable, specs: dict[str, NormalizationSpec]
) -> tuple[AttributeTable, NormalizationReport]:
    """Map every column into [0, 1] according to its spec.

    minmax_global sends the dataset min to 0 and max to 1; a constant column
    is degenerate and maps to 0 (reported, not fatal). share_of_region_total
    divides by the same row's denominator column (raw value) and clamps to
    [0, 1]; rows with a nonpositive denominator are flagged missing and
    zeroed. identity passes values through, clamping to [0, 1] if needed.
    """
    missing = {c for c in table.columns if c not in specs}
    if missing:
        raise KeyError(f"no normalization spec for columns: {sorted(missing)}")
    report = NormalizationReport()
    ids = list(table.rows)
    raw = np.array([table.rows[rid] for rid in ids], dtype=np.float64)
    out = np.empty_like(raw)
    flagged: set[str] = set(table.missing_ids)
    stats: dict[str, tuple[float, float]] = {}
    for j, name in enumerate(table.columns):
        spec = specs[name]
        col = raw[:, j]
        if spec.kind == "minmax_global":
            lo, hi = float(col.min()), float(col.max())
            stats[name] = (lo, hi)
            if hi == lo:
                report.degenerate_columns.append(name)
                out[:, j] = 0.0
            else:
                out[:, j] = (col - lo) / (hi - lo)
        elif spec.kind == "share_of_region_total":
            k = table.columns.index(spec.denominator_column)
            denom = raw[:, k]
            bad = denom <= 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                share = np.where(bad, 0.0, col / np.where(bad, 1.0, denom))
            out[:, j] = np.clip(share, 0.0, 1.0)
            for i in np.flatnonzero(bad):
                if ids[i] not in flagged:
                    flagged.add(ids[i])
                    report.flagged_missing.append(ids[i])
        else:  # identity
            clipped = np.clip(col, 0.0, 1.0)
            if np.any(clipped != col):
                report.clamped_columns.append(name)
            out[:, j] = clipped
    for rid in flagged:
        out[ids.index(rid), :] = 0.0
    rows = {rid: out[i].copy() for i, rid in enumerate(ids)}
    normalized = AttributeTable(
        columns=list(table.columns),
        rows=rows,
        normalized=True,
        missing_ids=frozenset(flagged),
        column_stats=stats,
    )
    return normalized, report


def attribute_vector(table: AttributeTable, region_id: str) -> np.ndarray:
    """The stored normalized row, or an all-zero vector for MISSING."""
    if region_id == MISSING:
        return np.zeros(table.d)
    try:
        return table.rows[region_id]
    except KeyError:
        raise UnknownRegion(region_id) from None


# ---------------------------------------------------------------------------
# Ingest


def load_regions(path) -> list[PolygonRegion]:
    with open(path) as fh:
        collection = json.load(fh)
    regions = []
    for feature in collection["features"]:
        geom = feature["geometry"]
        if geom["type"] != "Polygon":
            raise GeometryInvalid(f"unsupported geometry type {geom['type']!r}")
        rings = tuple(
            tuple((float(x), float(y)) for x, y in ring) for ring in geom["coordinates"]
        )
        regions.append(PolygonRegion(str(feature["properties"]["region_id"]), rings))
    return regions


def load_attributes(path, excluded_columns: list[str] | None = None) -> AttributeTable:
    excluded = list(excluded_columns or [])
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "region_id":
            raise KeyMismatch(f"first attribute column must be region_id, got {header[0]!r}")
        unknown = [c for c in excluded if c not in header[1:]]
        if unknown:
            raise KeyError(f"excluded columns not in table: {unknown}")
        keep = [j for j, c in enumerate(header[1:], start=1) if c not in excluded]
        columns = [header[j] for j in keep]
        rows: dict[str, np.ndarray] = {}
        for record in reader:
            rows[record[0]] = np.array([float(record[j]) for j in keep])
    return AttributeTable(columns=columns, rows=rows)


def ingest_regions(
    geometry_source,
    attributes_source,
    excluded_columns: list[str] | None = None,
) -> tuple[list[PolygonRegion], AttributeTable]:
    """Load and cross-validate geometry and attributes.

    Raises KeyMismatch listing region ids present on only one side.
    """
    regions = load_regions(geometry_source)
    table = load_attributes(attributes_source, excluded_columns)
    geom_ids = {r.region_id for r in regions}
    row_ids = set(table.rows)
    orphans_geom = sorted(geom_ids - row_ids)
    orphans_rows = sorted(row_ids - geom_ids)
    if orphans_geom or orphans_rows:
        raise KeyMismatch(
            f"regions without attribute rows: {orphans_geom}; "
            f"attribute rows without geometry: {orphans_rows}"
        )
    return regions, table


def load_normalization_specs(path) -> dict[str, NormalizationSpec]:
    """Config file mapping column name -> kind (or {kind, denominator_column})."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    specs = {}
    for name, value in raw.items():
        if isinstance(value, str):
            specs[name] = NormalizationSpec(kind=value)
        else:
            specs[name] = NormalizationSpec(
                kind=value["kind"],
                denominator_column=value.get("denominator_column"),
            )
    return specs


# ---------------------------------------------------------------------------
# Lambert conformal conic (spherical)


@dataclass(frozen=True)
class LambertParams:
    parallel1_deg: float
    parallel2_deg: float
    origin_lon_deg: float
    origin_lat_deg: float
    radius_m: float = 6_371_000.0
    false_easting: float = 0.0
    false_northing: float = 0.0

    def __post_init__(self):
        if self.parallel1_deg == self.parallel2_deg:
            raise ValueError("standard parallels must be distinct")


def _lcc_constants(params: LambertParams):
    p1 = math.radians(params.parallel1_deg)
    p2 = math.radians(params.parallel2_deg)
    lat0 = math.radians(params.origin_lat_deg)
    n = math.log(math.cos(p1) / math.cos(p2)) / math.log(
        math.tan(math.pi / 4 + p2 / 2) / math.tan(math.pi / 4 + p1 / 2)
    )
    F = math.cos(p1) * math.tan(math.pi / 4 + p1 / 2) ** n / n
    rho0 = params.radius_m * F / math.tan(math.pi / 4 + lat0 / 2) ** n
    return n, F, rho0


def project_lambert(lon_deg: float, lat_deg: float, params: LambertParams) -> Coordinate:
    """Forward Lambert conformal conic on a sphere, in meters."""
    if abs(lat_deg) >= 90.0:
        raise PoleInput(f"latitude {lat_deg} is at or beyond a pole")
    n, F, rho0 = _lcc_constants(params)
    lat = math.radians(lat_deg)
    dlon = math.radians(lon_deg - params.origin_lon_deg)
    rho = params.radius_m * F / math.tan(math.pi / 4 + lat / 2) ** n
    x = rho * math.sin(n * dlon) + params.false_easting
    y = rho0 - rho * math.cos(n * dlon) + params.false_northing
    return (x, y)


def inverse_lambert(x: float, y: float, params: LambertParams) -> tuple[float, float]:
    """Inverse of project_lambert; returns (lon_deg, lat_deg)."""
    n, F, rho0 = _lcc_constants(params)
    xp = x - params.false_easting
    yp = rho0 - (y - params.false_northing)
    sign = 1.0 if n >= 0 else -1.0
    rho = sign * math.hypot(xp, yp)
    theta = math.atan2(sign * xp, sign * yp)
    lat = 2 * math.atan((params.radius_m * F / rho) ** (1 / n)) - math.pi / 2
    lon = math.degrees(theta / n) + params.origin_lon_deg
    return (lon, math.degrees(lat))
