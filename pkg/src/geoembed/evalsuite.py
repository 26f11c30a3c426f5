"""Synthetic census-like worlds and the embedding evaluation battery.

The world is a rectangular grid of square regions. Latent smooth factor
fields (Gaussian bump mixtures) drive both the region attribute vectors
(through fixed random linear+sigmoid maps, evaluated at region centroids)
and the event intensity at every sampled location, so embeddings must
recover risk-relevant structure through the attribute bottleneck. Counts
are Poisson draws per period (train and test share the intensity), which
mimics calendar-year splits.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import glmgam
from .embedmodel import EmbeddingSet
from .geodata import AttributeTable, PolygonRegion

MORAN_NEIGHBORS = 8
MORAN_PERMUTATIONS = 999


class InsufficientTrainingData(ValueError):
    """A split leaves a model with no (or too few) training rows."""


# ---------------------------------------------------------------------------
# Synthetic world


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    rows: int = 20
    cols: int = 20
    cell_size: float = 1000.0
    n_factors: int = 3
    n_vars: int = 32
    n_locations: int = 10_000
    bumps_per_factor: int = 6
    base_log_intensity: float = -2.0
    factor_weight_scale: float = 0.7
    attribute_contrast: float = 1.5
    exposure: float = 1.0

    def __post_init__(self):
        if min(self.rows, self.cols) < 1 or self.cell_size <= 0:
            raise ValueError("region grid must be non-empty with positive cells")
        if self.n_vars < 1 or self.n_locations < 1 or self.n_factors < 0:
            raise ValueError("n_vars and n_locations must be positive")


@dataclass
class FactorField:
    """Smooth scalar field: weighted Gaussian bumps, standardized."""

    centers: np.ndarray  # (b, 2)
    scales: np.ndarray  # (b,)
    weights: np.ndarray  # (b,)
    shift: float = 0.0
    spread: float = 1.0

    def raw(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(xy)
        d2 = ((xy[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return (self.weights * np.exp(-d2 / (2.0 * self.scales**2))).sum(axis=1)

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        return (self.raw(xy) - self.shift) / self.spread


@dataclass
class SyntheticWorld:
    config: WorldConfig
    regions: list[PolygonRegion]
    raw_table: AttributeTable
    factors: list[FactorField]
    factor_weights: np.ndarray
    location_ids: list[str]
    coords: np.ndarray  # (n, 2)
    region_of_location: list[str]
    exposure: np.ndarray
    lambda_true: np.ndarray
    y_train: np.ndarray
    y_test: np.ndarray

    @property
    def locations(self) -> list[tuple[str, tuple[float, float]]]:
        return [
            (lid, (float(x), float(y)))
            for lid, (x, y) in zip(self.location_ids, self.coords)
        ]


def _region_id(r: int, c: int) -> str:
    return f"R{r:03d}C{c:03d}"


def _square_region(r: int, c: int, size: float) -> PolygonRegion:
    x0, y0 = c * size, r * size
    x1, y1 = x0 + size, y0 + size
    ring = ((x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0))
    return PolygonRegion(_region_id(r, c), (ring,))


def generate_world(config: WorldConfig) -> SyntheticWorld:
    """Deterministic in the seed: same config twice gives identical worlds."""
    rng = np.random.default_rng(config.seed)
    width = config.cols * config.cell_size
    height = config.rows * config.cell_size

    regions = [
        _square_region(r, c, config.cell_size)
        for r in range(config.rows)
        for c in range(config.cols)
    ]
    centroids = np.array(
        [
            ((c + 0.5) * config.cell_size, (r + 0.5) * config.cell_size)
            for r in range(config.rows)
            for c in range(config.cols)
        ]
    )

    # Smooth bump mixtures; length scales stay >= 3 cells.
    factors: list[FactorField] = []
    for _ in range(config.n_factors):
        b = config.bumps_per_factor
        f = FactorField(
            centers=rng.uniform([0, 0], [width, height], size=(b, 2)),
            scales=rng.uniform(3.0, 6.0, size=b) * config.cell_size,
            weights=rng.normal(0.0, 1.0, size=b),
        )
        vals = f.raw(centroids)
        f.shift = float(vals.mean())
        f.spread = float(vals.std()) or 1.0
        factors.append(f)

    factor_at_centroids = (
        np.column_stack([f(centroids) for f in factors])
        if factors
        else np.zeros((len(regions), 0))
    )
    mix = rng.normal(0.0, config.attribute_contrast, size=(config.n_factors, config.n_vars))
    bias = rng.normal(0.0, 0.3, size=config.n_vars)
    logits = factor_at_centroids @ mix + bias
    attributes = 1.0 / (1.0 + np.exp(-logits))
    columns = [f"v{j:03d}" for j in range(config.n_vars)]
    raw_table = AttributeTable(
        columns=columns,
        rows={r.region_id: attributes[i].copy() for i, r in enumerate(regions)},
    )

    coords = rng.uniform([0, 0], [width, height], size=(config.n_locations, 2))
    location_ids = [f"L{i:06d}" for i in range(config.n_locations)]
    # Square-grid membership is arithmetic; no polygon scan needed here.
    col_idx = np.minimum((coords[:, 0] // config.cell_size).astype(int), config.cols - 1)
    row_idx = np.minimum((coords[:, 1] // config.cell_size).astype(int), config.rows - 1)
    region_of_location = [_region_id(r, c) for r, c in zip(row_idx, col_idx)]

    weights = config.factor_weight_scale * rng.choice([-1.0, 1.0], size=config.n_factors)
    factor_at_locations = (
        np.column_stack([f(coords) for f in factors])
        if factors
        else np.zeros((config.n_locations, 0))
    )
    log_lambda = config.base_log_intensity + factor_at_locations @ weights
    lambda_true = np.exp(log_lambda)
    exposure = np.full(config.n_locations, float(config.exposure))
    y_train = rng.poisson(exposure * lambda_true)
    y_test = rng.poisson(exposure * lambda_true)

    return SyntheticWorld(
        config=config,
        regions=regions,
        raw_table=raw_table,
        factors=factors,
        factor_weights=weights,
        location_ids=location_ids,
        coords=coords,
        region_of_location=region_of_location,
        exposure=exposure,
        lambda_true=lambda_true,
        y_train=y_train,
        y_test=y_test,
    )


# ---------------------------------------------------------------------------
# Design assembly


def assemble_design(
    coords: np.ndarray,
    exposure: np.ndarray,
    embeddings: np.ndarray | None,
    k: int,
    basis: glmgam.SplineBasis | None = None,
    traditional: dict[str, np.ndarray] | None = None,
) -> tuple[glmgam.DesignMatrix, glmgam.SplineBasis | None]:
    """Intercept + traditional block + embedding block + spline block."""
    n = coords.shape[0]
    names = ["intercept"]
    blocks = [np.ones((n, 1))]
    for name, col in (traditional or {}).items():
        names.append(name)
        blocks.append(np.asarray(col, dtype=np.float64).reshape(n, 1))
    if embeddings is not None:
        for j in range(embeddings.shape[1]):
            names.append(f"emb_{j}")
        blocks.append(embeddings)
    spline_cols = None
    if k > 0:
        if basis is None:
            basis = glmgam.spline_basis(coords, k)
        start = sum(b.shape[1] for b in blocks)
        cols = basis.evaluate(coords)
        names.extend(basis.names)
        blocks.append(cols)
        spline_cols = slice(start, start + cols.shape[1])
    design = glmgam.DesignMatrix(
        names=names,
        X=np.hstack(blocks),
        offset=np.log(exposure),
        spline_cols=spline_cols,
    )
    return design, basis


# ---------------------------------------------------------------------------
# Knots sweep


DEFAULT_K_GRID = (0, 3, 5, 8, 10)
DEFAULT_LAMBDA_GRID = (1e-4, 1e-2, 1.0, 1e2, 1e4)


@dataclass
class DevianceTable:
    k_grid: tuple[int, ...]
    rows: list[dict] = field(default_factory=list)

    def row(self, k: int, with_embeddings: bool) -> dict | None:
        for r in self.rows:
            if r["k"] == k and r["with_embeddings"] == with_embeddings:
                return r
        return None


def knots_sweep(
    coords: np.ndarray,
    exposure: np.ndarray,
    y_train: np.ndarray,
    y_test: np.ndarray,
    embeddings: np.ndarray | None,
    k_grid=DEFAULT_K_GRID,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    traditional: dict[str, np.ndarray] | None = None,
    threads: int = 1,
) -> DevianceTable:
    """Fit every (k, with/without embeddings) combination except the empty
    (k=0, without) model; spline blocks get a GCV-chosen ridge weight.

    Fits are independent, so they may run on a thread pool; the table rows
    come out in a fixed order either way.
    """
    combos = [
        (k, with_emb)
        for k in k_grid
        for with_emb in (False, True)
        if not (k == 0 and not with_emb)  # the paper's "--" row: no model to fit
    ]
    if any(with_emb for _, with_emb in combos) and embeddings is None:
        raise ValueError("sweep requested embeddings but none provided")

    def fit_one(combo):
        k, with_emb = combo
        emb = embeddings if with_emb else None
        started = time.perf_counter()
        design, basis = assemble_design(coords, exposure, emb, k,
                                        traditional=traditional)
        if k > 0:
            lam, _ = glmgam.select_lambda(
                design, y_train, lambda_grid, penalty_block=basis.penalty()
            )
            fit = glmgam.fit_poisson(
                design, y_train, penalty_lambda=lam, penalty_block=basis.penalty()
            )
        else:
            lam = 0.0
            fit = glmgam.fit_poisson(design, y_train)
        return {
            "k": k,
            "with_embeddings": with_emb,
            "train_deviance": fit.train_deviance,
            "test_deviance": glmgam.test_deviance(fit, design, y_test),
            "edof": fit.edof,
            "lambda": lam,
            "wall_time_s": time.perf_counter() - started,
        }

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(fit_one, combos))
    else:
        rows = [fit_one(c) for c in combos]
    return DevianceTable(k_grid=tuple(k_grid), rows=rows)


def write_deviance_table(table: DevianceTable, path, include_time: bool = False) -> None:
    """Delimited report; wall times are kept out by default so reruns of the
    same seed are byte-identical (times go to the run's timing sidecar)."""
    cols = ["k", "with_embeddings", "train_deviance", "test_deviance", "edof", "lambda"]
    if include_time:
        cols.append("wall_time_s")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in sorted(table.rows, key=lambda r: (r["k"], r["with_embeddings"])):
            fh.write(",".join(_cell(r[c]) for c in cols) + "\n")


def _cell(value) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_deviance_table(table: DevianceTable) -> str:
    """Paper-style text table, including the dashed (k=0, without) row."""
    lines = [f"{'k':>4} {'embeddings':>11} {'train':>14} {'test':>14} {'edof':>10}"]
    for k in table.k_grid:
        for with_emb in (False, True):
            r = table.row(k, with_emb)
            tag = "with" if with_emb else "without"
            if r is None:
                lines.append(f"{k:>4} {tag:>11} {'--':>14} {'--':>14} {'--':>10}")
            else:
                lines.append(
                    f"{k:>4} {tag:>11} {r['train_deviance']:>14.2f} "
                    f"{r['test_deviance']:>14.2f} {r['edof']:>10.2f}"
                )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Out-of-territory experiment


def out_of_territory(
    coords: np.ndarray,
    exposure: np.ndarray,
    y_train: np.ndarray,
    y_test: np.ndarray,
    embeddings: np.ndarray,
    region_of_location: list[str],
    holdout_regions: set[str],
    gam_k: int = 10,
    lambda_grid=DEFAULT_LAMBDA_GRID,
) -> dict:
    """Test deviances inside the holdout territory for three models.

    OOT trains on everything outside the territory, WT only inside it, and
    the spline GAM baseline inside it; all three are scored on the
    territory's test-period counts.
    """
    inside = np.array([rid in holdout_regions for rid in region_of_location])
    idx_in = np.flatnonzero(inside)
    idx_out = np.flatnonzero(~inside)

    def subset(idx):
        return coords[idx], exposure[idx], y_train[idx], embeddings[idx]

    results: dict = {"n_inside": int(idx_in.size), "n_outside": int(idx_out.size)}
    if idx_in.size == 0:
        # Degenerate split: OOT is simply the full-data fit, scored everywhere.
        idx_in = np.arange(coords.shape[0])
        idx_out = np.arange(coords.shape[0])
        results["degenerate_empty_holdout"] = True

    eval_design, _ = assemble_design(
        coords[idx_in], exposure[idx_in], embeddings[idx_in], k=0
    )
    y_eval = y_test[idx_in]

    deviances = {}
    for name, train_idx in (("WT", idx_in), ("OOT", idx_out)):
        if train_idx.size == 0:
            raise InsufficientTrainingData(f"model {name} has no training rows")
        c, e, yt, emb = subset(train_idx)
        design, _ = assemble_design(c, e, emb, k=0)
        if design.n < design.p:
            raise InsufficientTrainingData(
                f"model {name}: {design.n} rows for {design.p} columns"
            )
        fit = glmgam.fit_poisson(design, yt)
        deviances[name] = glmgam.test_deviance(fit, eval_design, y_eval)

    # Spline-only GAM inside the territory, scored on the same rows.
    c, e, yt, _ = subset(idx_in)
    try:
        gam_design, gam_basis = assemble_design(c, e, None, k=gam_k)
    except glmgam.DegenerateExtent as exc:
        raise InsufficientTrainingData(f"GAM basis degenerate: {exc}") from exc
    lam, _ = glmgam.select_lambda(gam_design, yt, lambda_grid,
                                  penalty_block=gam_basis.penalty())
    gam_fit = glmgam.fit_poisson(gam_design, yt, penalty_lambda=lam,
                                 penalty_block=gam_basis.penalty())
    gam_eval, _ = assemble_design(coords[idx_in], exposure[idx_in], None,
                                  k=gam_k, basis=gam_basis)
    deviances["GAM"] = glmgam.test_deviance(gam_fit, gam_eval, y_eval)

    results.update(deviances)
    return results


# ---------------------------------------------------------------------------
# Moran's I


@dataclass
class MoranDimension:
    dim: int
    moran_i: float
    p_value: float
    zero_variance: bool = False


@dataclass
class MoranReport:
    k_neighbors: int
    n_permutations: int
    dimensions: list[MoranDimension] = field(default_factory=list)

    def dimension(self, j: int) -> MoranDimension:
        return self.dimensions[j]


def moran_i(
    embeddings: EmbeddingSet | np.ndarray,
    coords: np.ndarray,
    k_neighbors: int = MORAN_NEIGHBORS,
    n_permutations: int = MORAN_PERMUTATIONS,
    seed: int = 0,
) -> MoranReport:
    """Moran's I per embedding dimension with row-normalized k-NN weights.

    p-values are one-sided (positive autocorrelation) permutation tests:
    p = (1 + #{I_perm >= I_obs}) / (n_permutations + 1). Constant dimensions
    are flagged ZeroVariance instead of scored.
    """
    values = embeddings.values if isinstance(embeddings, EmbeddingSet) else embeddings
    n = values.shape[0]
    if k_neighbors >= n:
        raise ValueError(f"k_neighbors {k_neighbors} needs more than {n} points")
    tree = cKDTree(coords)
    _, nbr = tree.query(coords, k=k_neighbors + 1)
    nbr = nbr[:, 1:]  # drop self
    rng = np.random.default_rng(seed)
    report = MoranReport(k_neighbors=k_neighbors, n_permutations=n_permutations)

    def statistic(z: np.ndarray) -> float:
        lag = z[nbr].mean(axis=1)
        return float((z @ lag) / (z @ z))

    for j in range(values.shape[1]):
        x = values[:, j]
        z = x - x.mean()
        denom = float(z @ z)
        if denom == 0.0:
            report.dimensions.append(
                MoranDimension(dim=j, moran_i=math.nan, p_value=math.nan,
                               zero_variance=True)
            )
            continue
        observed = statistic(z)
        hits = 0
        for _ in range(n_permutations):
            if statistic(rng.permutation(z)) >= observed:
                hits += 1
        p = (1 + hits) / (n_permutations + 1)
        report.dimensions.append(MoranDimension(dim=j, moran_i=observed, p_value=p))
    return report


def write_moran_report(report: MoranReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("dim,moran_i,p_value,zero_variance\n")
        for d in report.dimensions:
            fh.write(
                f"{d.dim},{repr(d.moran_i)},{repr(d.p_value)},"
                f"{'yes' if d.zero_variance else 'no'}\n"
            )


# ---------------------------------------------------------------------------
# Per-peril p-value grid


def perperil_pvalue_grid(
    perils: dict[str, np.ndarray],
    coords: np.ndarray,
    exposure: np.ndarray,
    embeddings: np.ndarray,
    traditional: dict[str, np.ndarray] | None = None,
    alpha: float = 0.05,
) -> dict:
    """One embedding GLM per peril; grid of Wald p-values plus per-coefficient
    significance counts at the alpha threshold."""
    if not perils:
        raise ValueError("no perils given")
    grid: dict[str, np.ndarray] = {}
    names = None
    for peril, y in perils.items():
        design, _ = assemble_design(coords, exposure, embeddings, k=0,
                                    traditional=traditional)
        fit = glmgam.fit_poisson(design, y)
        grid[peril] = fit.p_values
        names = fit.names
    matrix = np.column_stack([grid[p] for p in perils])
    counts = (matrix < alpha).sum(axis=1)
    return {
        "coefficients": names,
        "perils": list(perils),
        "p_values": matrix,
        "significant_counts": counts,
        "alpha": alpha,
    }


# ---------------------------------------------------------------------------
# Plots


def export_plots(
    embeddings: EmbeddingSet,
    coords: np.ndarray,
    out_dir,
    dpi: int = 110,
) -> list[str]:
    """Per-dimension value maps and histograms as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not embeddings.location_ids:
        warnings.warn("empty embedding set: no plots exported")
        return []
    files = []
    for j in range(embeddings.embedding_dim):
        vals = embeddings.values[:, j]

        fig, ax = plt.subplots(figsize=(5, 4.2))
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=vals, s=4, cmap="viridis")
        fig.colorbar(sc, ax=ax)
        ax.set_title(f"embedding dimension {j}")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        map_path = out / f"map_dim{j:02d}.png"
        fig.savefig(map_path, dpi=dpi)
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        ax.hist(vals, bins=50, range=(-1, 1), color="#4477aa")
        ax.set_title(f"embedding dimension {j}")
        ax.set_xlabel("value")
        hist_path = out / f"hist_dim{j:02d}.png"
        fig.savefig(hist_path, dpi=dpi)
        plt.close(fig)
        files.extend([str(map_path), str(hist_path)])
    return files


# ---------------------------------------------------------------------------
# Misc utilities


def snap_to_nearest(points: np.ndarray, location_coords: np.ndarray) -> np.ndarray:
    """Index of the nearest location for each query point (event snapping)."""
    tree = cKDTree(location_coords)
    _, idx = tree.query(np.atleast_2d(points))
    return idx


def write_world(world: SyntheticWorld, out_dir) -> dict[str, str]:
    """Serialize a world to the pipeline's external formats."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "regions": str(out / "regions.geojson"),
        "attributes": str(out / "attributes.csv"),
        "locations": str(out / "locations.csv"),
        "normalization": str(out / "normalization.yaml"),
    }
    features = []
    for region in world.regions:
        features.append(
            {
                "type": "Feature",
                "properties": {"region_id": region.region_id},
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[x, y] for x, y in ring] for ring in region.rings],
                },
            }
        )
    with open(paths["regions"], "w") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh)
    with open(paths["attributes"], "w") as fh:
        fh.write("region_id," + ",".join(world.raw_table.columns) + "\n")
        for rid, row in world.raw_table.rows.items():
            fh.write(rid + "," + ",".join(repr(float(v)) for v in row) + "\n")
    with open(paths["locations"], "w") as fh:
        fh.write("location_id,x,y,region_id,exposure,y_train,y_test\n")
        for i, lid in enumerate(world.location_ids):
            fh.write(
                f"{lid},{repr(float(world.coords[i, 0]))},{repr(float(world.coords[i, 1]))},"
                f"{world.region_of_location[i]},{repr(float(world.exposure[i]))},"
                f"{int(world.y_train[i])},{int(world.y_test[i])}\n"
            )
    with open(paths["normalization"], "w") as fh:
        for col in world.raw_table.columns:
            fh.write(f"{col}: minmax_global\n")
    return paths
