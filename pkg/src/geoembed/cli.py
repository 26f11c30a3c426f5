"""Configuration-driven pipeline frontend.

Subcommands chain the stages: synth -> ingest -> cuboid -> train -> embed ->
fit -> evaluate -> report. Every stage validates the config, checks its
upstream artifacts, writes its outputs plus a manifest entry, and becomes a
no-op when nothing changed (content-hash comparison) unless --force.

Environment overrides: GEOEMBED_OUTPUT_DIR and GEOEMBED_THREADS.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import cuboid as cuboid_mod
from . import embedmodel, evalsuite, geodata, glmgam
from .tensornet import TrainConfig, train_loop

STAGES = ("synth", "ingest", "cuboid", "train", "embed", "fit", "evaluate", "report")


class ConfigInvalid(ValueError):
    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


class MissingArtifact(FileNotFoundError):
    def __init__(self, stage: str, path):
        super().__init__(
            f"stage {stage!r} needs {path}; run the upstream stage first"
        )
        self.path = str(path)


# ---------------------------------------------------------------------------
# Config

_WORLD_KEYS = {
    "seed": int, "rows": int, "cols": int, "cell_size": float,
    "n_factors": int, "n_vars": int, "n_locations": int,
    "bumps_per_factor": int, "base_log_intensity": float,
    "factor_weight_scale": float, "exposure": float,
}

SCHEMA: dict = {
    "output_dir": str,
    "threads": int,
    "geodata": {
        "regions": str,
        "attributes": str,
        "normalization": str,
        "excluded_columns": list,
    },
    "cuboid": {"spacing": float, "grid_size": int, "rng_seed": int},
    "model": {
        "architecture": str,
        "train_fraction": float,
        "batch_size": int,
        "seed": int,
        "weight_std": float,
        "lr0": float,
        "plateau_patience": int,
        "lr_factor": float,
        "max_reductions": int,
        "max_epochs": int,
        "max_train_cuboids": int,
    },
    "glm": {"k_grid": list, "lambda_grid": list},
    "eval": {
        "world": _WORLD_KEYS,
        "holdout_regions": list,
        "gam_k": int,
        "moran_permutations": int,
        "moran_seed": int,
        "saturation_threshold": float,
        "saturation_mass_cut": float,
    },
}

_NUMERIC = (int, float)


def _validate(node, schema, path: str) -> None:
    if not isinstance(node, dict):
        raise ConfigInvalid(path or "<root>", f"expected a mapping, got {type(node).__name__}")
    for key, value in node.items():
        key_path = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigInvalid(key_path, "unknown key")
        expected = schema[key]
        if isinstance(expected, dict):
            _validate(value, expected, key_path)
        elif expected is float:
            if not isinstance(value, _NUMERIC) or isinstance(value, bool):
                raise ConfigInvalid(key_path, f"expected a number, got {value!r}")
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigInvalid(key_path, f"expected an integer, got {value!r}")
        elif not isinstance(value, expected):
            raise ConfigInvalid(
                key_path, f"expected {expected.__name__}, got {type(value).__name__}"
            )


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(str(path), "config file does not exist")
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    _validate(cfg, SCHEMA, "")
    if "output_dir" not in cfg:
        raise ConfigInvalid("output_dir", "required")
    if os.environ.get("GEOEMBED_OUTPUT_DIR"):
        cfg["output_dir"] = os.environ["GEOEMBED_OUTPUT_DIR"]
    if os.environ.get("GEOEMBED_THREADS"):
        cfg["threads"] = int(os.environ["GEOEMBED_THREADS"])
    cfg.setdefault("threads", 1)
    return cfg


# ---------------------------------------------------------------------------
# Manifest

def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Manifest:
    def __init__(self, output_dir: Path):
        self.path = output_dir / "manifest.json"
        self.data = {"stages": {}}
        if self.path.exists():
            with open(self.path) as fh:
                self.data = json.load(fh)

    def signature(self, stage: str) -> str | None:
        return self.data["stages"].get(stage, {}).get("signature")

    def artifacts(self, stage: str) -> dict:
        return self.data["stages"].get(stage, {}).get("artifacts", {})

    def artifact_path(self, stage: str, name: str) -> str | None:
        entry = self.artifacts(stage).get(name)
        return entry["path"] if entry else None

    def record(self, stage: str, signature: str, artifacts: dict[str, str]) -> None:
        self.data["stages"][stage] = {
            "signature": signature,
            "artifacts": {
                name: {"path": str(p), "sha256": _sha256(p)}
                for name, p in artifacts.items()
            },
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def unchanged(self, stage: str, signature: str) -> bool:
        if self.signature(stage) != signature:
            return False
        for entry in self.artifacts(stage).values():
            p = Path(entry["path"])
            if not p.exists() or _sha256(p) != entry["sha256"]:
                return False
        return True


def _stage_signature(cfg_sections: dict, input_paths: list) -> str:
    payload = {
        "config": cfg_sections,
        "inputs": {str(p): _sha256(p) for p in input_paths},
    }
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()


def _require(stage: str, path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(stage, path)
    return path


# ---------------------------------------------------------------------------
# Stage implementations


def run_synth(cfg: dict, manifest: Manifest, force: bool = False) -> dict[str, str]:
    out = Path(cfg["output_dir"]) / "world"
    world_cfg = evalsuite.WorldConfig(**cfg.get("eval", {}).get("world", {}))
    signature = _stage_signature({"world": cfg.get("eval", {}).get("world", {})}, [])
    if not force and manifest.unchanged("synth", signature):
        print("synth: up to date, skipping")
        return {k: v["path"] for k, v in manifest.artifacts("synth").items()}
    world = evalsuite.generate_world(world_cfg)
    paths = evalsuite.write_world(world, out)
    manifest.record("synth", signature, paths)
    print(f"synth: wrote {len(paths)} artifacts under {out}")
    return paths


def _geodata_paths(cfg: dict, manifest: Manifest) -> dict[str, str]:
    section = cfg.get("geodata", {})
    synth = manifest.artifacts("synth")
    out: dict[str, str] = {}
    for key in ("regions", "attributes", "normalization"):
        if key in section:
            out[key] = section[key]
        elif key in synth:
            out[key] = synth[key]["path"]
        else:
            raise MissingArtifact("ingest", f"<{key} file: set geodata.{key} or run synth>")
    return out


def run_ingest(cfg: dict, manifest: Manifest, force: bool = False) -> dict[str, str]:
    paths = _geodata_paths(cfg, manifest)
    for p in paths.values():
        _require("ingest", p)
    out_dir = Path(cfg["output_dir"]) / "ingested"
    signature = _stage_signature(
        {"geodata": cfg.get("geodata", {})}, list(paths.values())
    )
    if not force and manifest.unchanged("ingest", signature):
        print("ingest: up to date, skipping")
        return {k: v["path"] for k, v in manifest.artifacts("ingest").items()}
    excluded = cfg.get("geodata", {}).get("excluded_columns", [])
    regions, raw = geodata.ingest_regions(paths["regions"], paths["attributes"], excluded)
    specs = geodata.load_normalization_specs(paths["normalization"])
    table, report = geodata.normalize(raw, specs)
    out_dir.mkdir(parents=True, exist_ok=True)
    normalized_path = out_dir / "normalized.csv"
    with open(normalized_path, "w") as fh:
        fh.write("region_id," + ",".join(table.columns) + "\n")
        for rid, row in table.rows.items():
            fh.write(rid + "," + ",".join(repr(float(v)) for v in row) + "\n")
    report_path = out_dir / "ingest_report.json"
    with open(report_path, "w") as fh:
        json.dump(
            {
                "n_regions": len(regions),
                "d": table.d,
                "degenerate_columns": report.degenerate_columns,
                "clamped_columns": report.clamped_columns,
                "flagged_missing": report.flagged_missing,
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    artifacts = {"normalized": str(normalized_path), "report": str(report_path)}
    manifest.record("ingest", signature, artifacts)
    print(f"ingest: {len(regions)} regions, d={table.d}")
    return artifacts


def _load_normalized(path) -> geodata.AttributeTable:
    table = geodata.load_attributes(path)
    table.normalized = True
    return table


def _load_locations(path) -> dict:
    ids, xs, ys, rids, exposure, y_train, y_test = [], [], [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            ids.append(row["location_id"])
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
            rids.append(row.get("region_id", geodata.MISSING))
            exposure.append(float(row.get("exposure", 1.0)))
            y_train.append(int(row.get("y_train", 0)))
            y_test.append(int(row.get("y_test", 0)))
    return {
        "ids": ids,
        "coords": np.column_stack([xs, ys]),
        "region_ids": rids,
        "exposure": np.array(exposure),
        "y_train": np.array(y_train),
        "y_test": np.array(y_test),
    }


def run_cuboid(cfg: dict, manifest: Manifest, force: bool = False) -> dict[str, str]:
    regions_path = _require("cuboid", _geodata_paths(cfg, manifest)["regions"])
    normalized = manifest.artifact_path("ingest", "normalized")
    if normalized is None:
        raise MissingArtifact("cuboid", Path(cfg["output_dir"]) / "ingested/normalized.csv")
    normalized = _require("cuboid", normalized)
    locations_path = manifest.artifact_path("synth", "locations")
    if locations_path is None:
        raise MissingArtifact("cuboid", Path(cfg["output_dir"]) / "world/locations.csv")
    locations_path = _require("cuboid", locations_path)

    signature = _stage_signature(
        {"cuboid": cfg.get("cuboid", {})}, [regions_path, normalized, locations_path]
    )
    if not force and manifest.unchanged("cuboid", signature):
        print("cuboid: up to date, skipping")
        return {k: v["path"] for k, v in manifest.artifacts("cuboid").items()}

    params = cuboid_mod.GridParams(**cfg.get("cuboid", {}))
    regions = geodata.load_regions(regions_path)
    index = geodata.RegionIndex(regions)
    table = _load_normalized(normalized)
    loc = _load_locations(locations_path)
    locations = list(zip(loc["ids"], map(tuple, loc["coords"])))
    _, cache = cuboid_mod.build_cuboids(locations, params, index, table)

    out_dir = Path(cfg["output_dir"]) / "cuboids"
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_path = out_dir / "cache.csv"
    cuboid_mod.write_cache(cache, cache_path)
    centers_path = out_dir / "centers.csv"
    with open(centers_path, "w") as fh:
        fh.write("location_id,region_id\n")
        for lid, (x, y) in locations:
            fh.write(f"{lid},{index.lookup((x, y))}\n")
    artifacts = {"cache": str(cache_path), "centers": str(centers_path)}
    manifest.record("cuboid", signature, artifacts)
    print(f"cuboid: cached {len(cache.entries)} locations (grid {params.grid_size})")
    return artifacts


def _replayed_cuboid_array(cfg, manifest, stage: str):
    cache_path = manifest.artifact_path("cuboid", "cache")
    normalized = manifest.artifact_path("ingest", "normalized")
    for needed, fallback in ((cache_path, "cuboids/cache.csv"), (normalized, "ingested/normalized.csv")):
        if needed is None:
            raise MissingArtifact(stage, Path(cfg["output_dir"]) / fallback)
    cache_path = _require(stage, cache_path)
    normalized = _require(stage, normalized)
    grid_size = cfg.get("cuboid", {}).get("grid_size", 16)
    table = _load_normalized(normalized)
    cache = cuboid_mod.read_cache(cache_path, grid_size)
    cuboids = cuboid_mod.replay_cache(cache, table)
    ids = list(cache.entries)
    X = np.stack([cuboids[lid] for lid in ids])
    return ids, X, table, cache


def _center_targets(cfg, manifest, stage, ids, table):
    centers_path = manifest.artifact_path("cuboid", "centers")
    if centers_path is None:
        raise MissingArtifact(stage, Path(cfg["output_dir"]) / "cuboids/centers.csv")
    centers_path = _require(stage, centers_path)
    region_of = {}
    with open(centers_path, newline="") as fh:
        for row in csv.DictReader(fh):
            region_of[row["location_id"]] = row["region_id"]
    return np.stack([geodata.attribute_vector(table, region_of[lid]) for lid in ids])


def run_train(cfg: dict, manifest: Manifest, force: bool = False) -> dict[str, str]:
    model_cfg = dict(cfg.get("model", {}))
    inputs = [
        _require("train", manifest.artifact_path("cuboid", name) or
                 Path(cfg["output_dir"]) / f"cuboids/{name}.csv")
        for name in ("cache", "centers")
    ]
    normalized = manifest.artifact_path("ingest", "normalized")
    if normalized is None:
        raise MissingArtifact("train", Path(cfg["output_dir"]) / "ingested/normalized.csv")
    inputs.append(_require("train", normalized))
    signature = _stage_signature({"model": model_cfg, "cuboid": cfg.get("cuboid", {})}, inputs)
    if not force and manifest.unchanged("train", signature):
        print("train: up to date, skipping")
        return {k: v["path"] for k, v in manifest.artifacts("train").items()}

    ids, X, table, _ = _replayed_cuboid_array(cfg, manifest, "train")
    architecture = model_cfg.pop("architecture", "small_cbow")
    train_fraction = model_cfg.pop("train_fraction", 0.9)
    weight_std = model_cfg.pop("weight_std", 1e-3)
    max_train = model_cfg.pop("max_train_cuboids", len(ids))
    train_config = TrainConfig(**model_cfg)

    mode = "cbow" if architecture.endswith("cbow") else "crae"
    if mode == "cbow":
        targets = _center_targets(cfg, manifest, "train", ids, table)
    else:
        targets = X

    rng = np.random.default_rng(train_config.seed)
    order = rng.permutation(len(ids))[: max(2, min(max_train, len(ids)))]
    split = min(max(int(len(order) * train_fraction), 2), len(order))
    tr = order[:split]
    va = order[split:] if len(order) - split >= 2 else tr

    grid_size = cfg.get("cuboid", {}).get("grid_size", 16)
    encoder, decoder = embedmodel.build_architecture(architecture, table.d, grid_size)
    model = embedmodel.AutoencoderModel(encoder, decoder, mode)
    model.initialize(train_config.seed, weight_std)
    log = train_loop(model, (X[tr], targets[tr]), (X[va], targets[va]), train_config)

    out_dir = Path(cfg["output_dir"]) / "model"
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.geonet"
    embedmodel.save_model(
        checkpoint_path, architecture, table.d, grid_size, model,
        meta={"seed": train_config.seed, "best_val_loss": log.best_val_loss,
              "best_epoch": log.best_epoch, "stopped": log.stopped_reason},
    )
    log_path = out_dir / "training_log.csv"
    with open(log_path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,lr,reductions\n")
        for row in log.as_rows():
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    artifacts = {"checkpoint": str(checkpoint_path), "training_log": str(log_path)}
    manifest.record("train", signature, artifacts)
    print(
        f"train: {architecture} for {len(log.epochs)} epochs, "
        f"best val loss {log.best_val_loss:.6g} ({log.stopped_reason})"
    )
    return artifacts


def run_embed(cfg: dict, manifest: Manifest, force: bool = False) -> dict[str, str]:
    checkpoint = manifest.artifact_path("train", "checkpoint")
    if checkpoint is None:
        raise MissingArtifact("embed", Path(cfg["output_dir"]) / "model/checkpoint.geonet")
    checkpoint = _require("embed", checkpoint)
    cache_path = manifest.artifact_path("cuboid", "cache")
    if cache_path is None:
        raise MissingArtifact("embed", Path(cfg["output_dir"]) / "cuboids/cache.csv")
    eval_cfg = cfg.get("eval", {})
    signature = _stage_signature(
        {"saturation_threshold": eval_cfg.get("saturation_threshold", 1e-3),
         "saturation_mass_cut": eval_cfg.get("saturation_mass_cut", 0.95)},
        [checkpoint, _require("embed", cache_path)],
    )
    if not force and manifest.unchanged("embed", signature):
        print("embed: up to date, skipping")
        return {k: v["path"] for k, v in manifest.artifacts("embed").items()}

    ids, X, _, cache = _replayed_cuboid_array(cfg, manifest, "embed")
    model, header = embedmodel.load_model(checkpoint)
    embeddings = embedmodel.extract_embeddings(
        model.encoder, ids, X,
        provenance={
            "architecture": header["architecture"],
            "checkpoint_hash": embedmodel.checkpoint_hash(checkpoint),
            "grid_size": header["grid_size"],
            "d": header["d"],
            "seed": header["meta"].get("seed"),
        },
    )
    embeddings = embedmodel.saturation_filter(
        embeddings,
        threshold=eval_cfg.get("saturation_threshold", 1e-3),
        mass_cut=eval_cfg.get("saturation_mass_cut", 0.95),
    )
    out_dir = Path(cfg["output_dir"]) / "embeddings"
    out_dir.mkdir(parents=True, exist_ok=True)
    emb_path = out_dir / "embeddings.csv"
    meta_path = out_dir / "embeddings_meta.json"
    embedmodel.write_embeddings(embeddings, emb_path, meta_path)
    artifacts = {"embeddings": str(emb_path), "meta": str(meta_path)}
    manifest.record("embed", signature, artifacts)
    print(
        f"embed: {len(ids)} locations, {embeddings.embedding_dim} dims, "
        f"retained {list(embeddings.retained_dims)}"
    )
    return artifacts


def _embedding_inputs(cfg, manifest, stage):
    emb_path = manifest.artifact_path("embed", "embeddings")
    if emb_path is None:
        raise MissingArtifact(stage, Path(cfg["output_dir"]) / "embeddings/embeddings.csv")
    emb_path = _require(stage, emb_path)
    meta_path = _require(stage, manifest.artifact_path("embed", "meta"))
    locations_path = manifest.artifact_path("synth", "locations")
    if locations_path is None:
        raise MissingArtifact(stage, Path(cfg["output_dir"]) / "world/locations.csv")
    locations_path = _require(stage, locations_path)
    embeddings = embedmodel.read_embeddings(emb_path, meta_path)
    loc = _load_locations(locations_path)
    if loc["ids"] != embeddings.location_ids:
        order = [embeddings.location_ids.index(lid) for lid in loc["ids"]]
        embeddings.values = embeddings.values[order]
        embeddings.location_ids = list(loc["ids"])
    return embeddings, loc, [emb_path, meta_path, locations_path]


def run_fit(cfg: dict, manifest: Manifest, force: bool = False,
            threads: int | None = None) -> dict[str, str]:
    embeddings, loc, inputs = _embedding_inputs(cfg, manifest, "fit")
    glm_cfg = cfg.get("glm", {})
    signature = _stage_signature({"glm": glm_cfg}, inputs)
    if not force and manifest.unchanged("fit", signature):
        print("fit: up to date, skipping")
        return {k: v["path"] for k, v in manifest.artifacts("fit").items()}

    table = evalsuite.knots_sweep(
        loc["coords"], loc["exposure"], loc["y_train"], loc["y_test"],
        embeddings.retained_values(),
        k_grid=tuple(glm_cfg.get("k_grid", evalsuite.DEFAULT_K_GRID)),
        lambda_grid=tuple(glm_cfg.get("lambda_grid", evalsuite.DEFAULT_LAMBDA_GRID)),
        threads=threads or cfg.get("threads", 1),
    )
    out_dir = Path(cfg["output_dir"]) / "fits"
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "deviance_table.csv"
    evalsuite.write_deviance_table(table, table_path)
    timing_path = out_dir / "timings.csv"
    with open(timing_path, "w") as fh:
        fh.write("k,with_embeddings,wall_time_s\n")
        for r in sorted(table.rows, key=lambda r: (r["k"], r["with_embeddings"])):
            fh.write(f"{r['k']},{'yes' if r['with_embeddings'] else 'no'},{r['wall_time_s']:.3f}\n")
    artifacts = {"deviance_table": str(table_path), "timings": str(timing_path)}
    manifest.record("fit", signature, artifacts)
    print(f"fit: {len(table.rows)} models swept")
    return artifacts


def _default_holdout(region_ids: list[str]) -> set[str]:
    # Lower-left block of the region grid, roughly 9% of regions.
    rows = sorted({rid[1:4] for rid in region_ids})
    cols = sorted({rid[5:8] for rid in region_ids})
    r_cut = rows[: max(1, int(0.3 * len(rows)))]
    c_cut = cols[: max(1, int(0.3 * len(cols)))]
    return {f"R{r}C{c}" for r in r_cut for c in c_cut}


def run_evaluate(cfg: dict, manifest: Manifest, force: bool = False) -> dict[str, str]:
    embeddings, loc, inputs = _embedding_inputs(cfg, manifest, "evaluate")
    eval_cfg = cfg.get("eval", {})
    signature = _stage_signature({"eval": {k: v for k, v in eval_cfg.items() if k != "world"}}, inputs)
    if not force and manifest.unchanged("evaluate", signature):
        print("evaluate: up to date, skipping")
        return {k: v["path"] for k, v in manifest.artifacts("evaluate").items()}

    holdout = set(eval_cfg.get("holdout_regions") or _default_holdout(loc["region_ids"]))
    oot = evalsuite.out_of_territory(
        loc["coords"], loc["exposure"], loc["y_train"], loc["y_test"],
        embeddings.retained_values(), loc["region_ids"], holdout,
        gam_k=eval_cfg.get("gam_k", 10),
        lambda_grid=tuple(cfg.get("glm", {}).get("lambda_grid", evalsuite.DEFAULT_LAMBDA_GRID)),
    )
    moran = evalsuite.moran_i(
        embeddings, loc["coords"],
        n_permutations=eval_cfg.get("moran_permutations", evalsuite.MORAN_PERMUTATIONS),
        seed=eval_cfg.get("moran_seed", 0),
    )
    out_dir = Path(cfg["output_dir"]) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    oot_path = out_dir / "oot.json"
    with open(oot_path, "w") as fh:
        json.dump({**oot, "holdout_regions": sorted(holdout)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    moran_path = out_dir / "moran.csv"
    evalsuite.write_moran_report(moran, moran_path)
    artifacts = {"oot": str(oot_path), "moran": str(moran_path)}
    manifest.record("evaluate", signature, artifacts)
    print(f"evaluate: OOT {oot.get('OOT'):.1f} vs WT {oot.get('WT'):.1f} vs GAM {oot.get('GAM'):.1f}")
    return artifacts


def run_report(cfg: dict, manifest: Manifest, force: bool = False) -> dict[str, str]:
    table_path = manifest.artifact_path("fit", "deviance_table")
    if table_path is None:
        raise MissingArtifact("report", Path(cfg["output_dir"]) / "fits/deviance_table.csv")
    table_path = _require("report", table_path)
    embeddings, loc, _ = _embedding_inputs(cfg, manifest, "report")

    rows = []
    with open(table_path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "k": int(row["k"]),
                    "with_embeddings": row["with_embeddings"] == "yes",
                    "train_deviance": float(row["train_deviance"]),
                    "test_deviance": float(row["test_deviance"]),
                    "edof": float(row["edof"]),
                    "lambda": float(row["lambda"]),
                }
            )
    table = evalsuite.DevianceTable(
        k_grid=tuple(sorted({r["k"] for r in rows})), rows=rows
    )
    out_dir = Path(cfg["output_dir"]) / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "summary.txt"
    with open(summary_path, "w") as fh:
        fh.write(evalsuite.render_deviance_table(table) + "\n")
    plots = evalsuite.export_plots(embeddings, loc["coords"], out_dir / "plots")
    artifacts = {"summary": str(summary_path)}
    for p in plots:
        artifacts[Path(p).name] = p
    manifest.record("report", _stage_signature({}, [table_path]), artifacts)
    print(f"report: summary and {len(plots)} plots under {out_dir}")
    return artifacts


RUNNERS = {
    "synth": run_synth,
    "ingest": run_ingest,
    "cuboid": run_cuboid,
    "train": run_train,
    "embed": run_embed,
    "fit": run_fit,
    "evaluate": run_evaluate,
    "report": run_report,
}


def run_stage(stage: str, cfg: dict, force: bool = False) -> dict[str, str]:
    manifest = Manifest(Path(cfg["output_dir"]))
    return RUNNERS[stage](cfg, manifest, force=force)


def run_pipeline(cfg: dict, force: bool = False) -> None:
    for stage in STAGES:
        run_stage(stage, cfg, force=force)


# ---------------------------------------------------------------------------
# Entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="geoembed",
        description="Geographic embedding pipeline: synth | ingest | cuboid | "
                    "train | embed | fit | evaluate | report | all",
    )
    parser.add_argument("stage", choices=(*STAGES, "all"))
    parser.add_argument("--config", "-c", required=True, help="YAML run configuration")
    parser.add_argument("--force", action="store_true",
                        help="re-run even when inputs are unchanged")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for independent fits")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.threads is not None:
            cfg["threads"] = args.threads
        if args.stage == "all":
            run_pipeline(cfg, force=args.force)
        else:
            run_stage(args.stage, cfg, force=args.force)
    except (ConfigInvalid, MissingArtifact) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (geodata.GeometryInvalid, geodata.KeyMismatch, geodata.UnknownRegion,
            glmgam.NonConvergence, glmgam.RankDeficient,
            evalsuite.InsufficientTrainingData, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
