import json

import numpy as np
import pytest

from geoembed.geodata import AttributeTable, PolygonRegion


def square(region_id, x0, y0, size=1.0):
    ring = ((x0, y0), (x0 + size, y0), (x0 + size, y0 + size), (x0, y0 + size), (x0, y0))
    return PolygonRegion(region_id, (ring,))


def write_geojson(path, regions):
    features = [
        {
            "type": "Feature",
            "properties": {"region_id": r.region_id},
            "geometry": {
                "type": "Polygon",
                "coordinates": [[[x, y] for x, y in ring] for ring in r.rings],
            },
        }
        for r in regions
    ]
    path.write_text(json.dumps({"type": "FeatureCollection", "features": features}))
    return path


def write_csv(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def three_squares(tmp_path):
    regions = [square("A", 0, 0), square("B", 1, 0), square("C", 2, 0)]
    geo = write_geojson(tmp_path / "regions.geojson", regions)
    attrs = write_csv(
        tmp_path / "attrs.csv",
        ["region_id", "pop", "income", "age"],
        [["A", 10, 50, 30], ["B", 20, 60, 40], ["C", 30, 70, 50]],
    )
    return geo, attrs


@pytest.fixture
def normalized_table():
    rows = {
        "A": np.array([0.0, 0.25, 1.0, 0.5]),
        "B": np.array([1.0, 0.75, 0.0, 0.5]),
    }
    return AttributeTable(columns=["a", "b", "c", "d"], rows=rows, normalized=True)
