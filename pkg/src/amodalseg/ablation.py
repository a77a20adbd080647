"""Ablation harness: train each grid configuration per seed and tabulate mask metrics."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .dataset import Dataset
from .evaluation import EvalConfig, evaluate, format_table, metrics_row
from .inference import coarse_detections, infer
from .model import AmodalModel
from .shape_prior import ShapeCodebook, build_codebook, collect_amodal_crops, train_autoencoder
from .synthetic import generate_splits
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

TOGGLE_COLUMNS = ("variant", "visible_attention", "reclass", "shape_prior_refine", "rescoring", "feature_matching")
METRIC_COLUMNS = ("AP", "AP50", "AP75", "AR", "AP_occluded", "visible_AP", "visible_AR")
# options that only change inference; models trained with or without them are identical
INFERENCE_ONLY = ("rescoring",)


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 500
    n_val: int = 100
    categories: int = 3


@dataclass(frozen=True)
class AblationRun:
    name: str
    train: dict = field(default_factory=dict)   # TrainConfig overrides
    coarse_only: bool = False                   # score the coarse masks of the trained model


@dataclass
class AblationGrid:
    runs: list[AblationRun]
    seeds: tuple[int, ...] = (0,)
    data: DataSpec = field(default_factory=DataSpec)
    base: dict = field(default_factory=dict)
    autoencoder_epochs: int = 40
    use_gt_boxes: bool = True
    cache_dir: str | None = None
    out_csv: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "AblationGrid":
        d = dict(d)
        runs = [AblationRun(r["name"], dict(r.get("train", {})), bool(r.get("coarse_only", False)))
                for r in d.pop("runs")]
        names = [r.name for r in runs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate run names in grid: {names}")
        data = DataSpec(**d.pop("data", {}))
        seeds = tuple(int(s) for s in d.pop("seeds", (0,)))
        return cls(runs, seeds, data, **d)


def load_grid(path: str | Path) -> AblationGrid:
    with open(path) as fh:
        return AblationGrid.from_dict(yaml.safe_load(fh))


def table2_runs() -> list[AblationRun]:
    """Full model, one component removed at a time, the coarse baseline and the attention variants."""
    return [
        AblationRun("full"),
        AblationRun("coarse-only", coarse_only=True),
        AblationRun("no-visible-attention", {"visible_attention": False}),
        AblationRun("no-reclass", {"reclass": False}),
        AblationRun("no-shape-prior", {"shape_prior_refine": False, "rescoring": False}),
        AblationRun("no-prior-refine", {"shape_prior_refine": False}),
        AblationRun("no-rescoring", {"rescoring": False}),
        AblationRun("no-feature-matching", {"toggles": {"amodal_fm": False, "visible_fm": False}}),
        AblationRun("both-self", {"variant": "both-self"}),
        AblationRun("only-visible", {"variant": "only-visible"}),
        AblationRun("cross", {"variant": "cross"}),
    ]


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def run_config(grid: AblationGrid, run: AblationRun, seed: int) -> TrainConfig:
    d = {**grid.base, **run.train, "seed": seed}
    toggles = {**grid.base.get("toggles", {}), **run.train.get("toggles", {})}
    if toggles:
        d["toggles"] = toggles
    return TrainConfig.from_dict(d)


def build_shape_prior(train_ds: Dataset, seed: int, k: int = 64, dim: int = 32, epochs: int = 40,
                      cache: Path | None = None) -> ShapeCodebook:
    key = _digest({"data": train_ds_key(train_ds), "seed": seed, "k": k, "dim": dim, "epochs": epochs})
    path = cache / "codebooks" / f"{key}.npz" if cache else None
    if path is not None and path.exists():
        return ShapeCodebook.load(path)
    crops = collect_amodal_crops(train_ds)
    ae, _ = train_autoencoder(np.concatenate(list(crops.values())), epochs=epochs, seed=seed, dim=dim)
    codebook = build_codebook(ae, crops, k=k, seed=seed)
    if path is not None:
        codebook.save(path)
    return codebook


def train_ds_key(ds: Dataset) -> str:
    h = hashlib.sha256()
    for s in ds.scenes:
        h.update(s.image.tobytes())
    return h.hexdigest()[:16]


def model_cache_key(data_key: str, cfg: TrainConfig, codebook_digest: str | None) -> str:
    """Hash of the training-relevant, non-default config fields plus data and codebook identity."""
    default = TrainConfig(seed=cfg.seed).to_dict()
    d = {k: v for k, v in cfg.to_dict().items() if k not in INFERENCE_ONLY and v != default[k]}
    d["seed"] = cfg.seed
    return _digest({"cfg": d, "data": data_key, "codebook": codebook_digest})


def trained_model(train_ds: Dataset, cfg: TrainConfig, codebook: ShapeCodebook | None,
                  cache: Path | None = None) -> tuple[AmodalModel, float]:
    """Train (or load from cache) one configuration; returns the model and its training wall time."""
    uses_cb = cfg.options.uses_priors
    key = model_cache_key(train_ds_key(train_ds), cfg, codebook.storage_digest() if uses_cb else None)
    path = cache / "models" / key / "checkpoint.npz" if cache else None
    if path is not None and path.exists():
        model, extra = AmodalModel.load(path)
        return model, float(extra.get("wall_time", float("nan")))
    result = train(train_ds, cfg, codebook if uses_cb else None, out_dir=path.parent if path else None)
    return result.model, result.wall_time


def predict_dataset(model: AmodalModel, ds: Dataset, codebook, options, use_gt_boxes: bool = True,
                    coarse_only: bool = False, nms_threshold: float = 0.5) -> dict:
    out = {}
    for scene in ds.scenes:
        proposals = np.stack([i.box.as_array() for i in scene.instances]) if use_gt_boxes else None
        dets = infer(scene.image, model, codebook, options=options, proposals=proposals,
                     nms_threshold=nms_threshold)
        out[scene.image_id] = coarse_detections(dets, scene.size) if coarse_only else dets
    return out


def evaluate_model(model: AmodalModel, ds: Dataset, codebook, options, use_gt_boxes: bool = True,
                   coarse_only: bool = False, cfg: EvalConfig | None = None) -> dict:
    cfg = cfg or EvalConfig()
    dets = predict_dataset(model, ds, codebook, options, use_gt_boxes, coarse_only, cfg.nms_threshold)
    return evaluate(dets, ds, cfg)


def _row(run: AblationRun, cfg: TrainConfig, seed, metrics: dict) -> dict:
    fm = cfg.toggles["amodal_fm"] or cfg.toggles["visible_fm"]
    row = {"name": run.name, "seed": seed, "variant": cfg.variant,
           "visible_attention": cfg.visible_attention and not run.coarse_only,
           "reclass": cfg.reclass, "shape_prior_refine": cfg.options.uses_priors and not run.coarse_only,
           "rescoring": cfg.rescoring, "feature_matching": fm}
    row.update(metrics)
    return row


def run_ablation(grid: AblationGrid, progress=None) -> list[dict]:
    """One row per (run, seed) plus a mean row per run (seed = "mean")."""
    cache = Path(grid.cache_dir) if grid.cache_dir else None
    rows = []
    for seed in grid.seeds:
        train_ds, val_ds = generate_splits(grid.data.n_train, grid.data.n_val, seed=seed,
                                           n_categories=grid.data.categories)
        base = TrainConfig.from_dict({**grid.base, "seed": seed})
        codebook = build_shape_prior(train_ds, seed, base.codebook_size, base.embedding_dim,
                                     grid.autoencoder_epochs, cache)
        for run in grid.runs:
            cfg = run_config(grid, run, seed)
            t0 = time.perf_counter()
            model, wall = trained_model(train_ds, cfg, codebook, cache)
            result = evaluate_model(model, val_ds, codebook, cfg.options, grid.use_gt_boxes, run.coarse_only)
            row = _row(run, cfg, seed, metrics_row(result))
            row["train_seconds"] = wall
            rows.append(row)
            logger.info("%s seed %d: AP %.4f (%.1fs)", run.name, seed, row["AP"], time.perf_counter() - t0)
            if progress:
                progress(row)
    for run in grid.runs:
        mine = [r for r in rows if r["name"] == run.name]
        mean = dict(mine[0], seed="mean")
        for c in (*METRIC_COLUMNS, "train_seconds"):
            mean[c] = float(np.mean([r[c] for r in mine]))
        rows.append(mean)
    if grid.out_csv:
        write_results(rows, grid.out_csv)
    return rows


def write_results(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["name", "seed", *TOGGLE_COLUMNS, *METRIC_COLUMNS, "train_seconds"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def results_table(rows: list[dict]) -> str:
    return format_table([r for r in rows if r["seed"] == "mean"] or rows, ["name", *METRIC_COLUMNS])


def default_grid(seeds=(0, 1, 2), **kw) -> AblationGrid:
    return AblationGrid(table2_runs(), tuple(seeds), **kw)


def with_runs(grid: AblationGrid, names) -> AblationGrid:
    keep = [r for r in grid.runs if r.name in set(names)]
    return replace(grid, runs=keep)
