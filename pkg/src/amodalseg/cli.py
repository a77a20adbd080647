"""Command-line entry point: data generation, codebook, training, evaluation, ablation, figures."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np


def _generate(args) -> int:
    from .dataset import save_split
    from .synthetic import generate_splits

    train, val = generate_splits(args.n_train, args.n_val, seed=args.seed, n_categories=args.categories,
                                 n_workers=args.workers)
    for ds, split in ((train, "train"), (val, "val")):
        p = save_split(ds, args.out, split)
        print(f"{split}: {len(ds)} scenes, {sum(len(s.instances) for s in ds.scenes)} instances -> {p}")
    return 0


def _build_codebook(args) -> int:
    from .dataset import load_split
    from .shape_prior import build_codebook, collect_amodal_crops, reconstruction_iou, train_autoencoder

    ds = load_split(args.data, "train")
    crops = collect_amodal_crops(ds)
    masks = np.concatenate(list(crops.values()))
    ae, hist = train_autoencoder(masks, epochs=args.epochs, seed=args.seed, dim=args.dim)
    cb = build_codebook(ae, crops, k=args.k, seed=args.seed)
    cb.save(args.out)
    print(f"autoencoder: final BCE {hist.epoch_bce[-1]:.4f}, "
          f"reconstruction IoU {reconstruction_iou(ae, masks).mean():.3f}")
    print(f"codebook: {', '.join(f'cat {c}: {cb.size(c)}' for c in cb.categories)} -> {args.out}")
    return 0


def _train(args) -> int:
    from .dataset import load_split
    from .shape_prior import ShapeCodebook
    from .training import TrainConfig, load_train_config, smoothed, train

    cfg = load_train_config(args.config) if args.config else TrainConfig()
    ds = load_split(args.data, "train")
    cb = ShapeCodebook.load(args.codebook) if args.codebook else None
    res = train(ds, cfg, cb, out_dir=args.out)
    s = smoothed(res.term_curve("amodal_coarse"))
    print(f"trained {cfg.iterations} iterations in {res.wall_time:.1f}s -> {res.checkpoint}")
    print(f"smoothed coarse amodal BCE: {s[min(49, len(s) - 1)]:.4f} -> {s[-1]:.4f}")
    return 0


def _write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _eval(args) -> int:
    from .ablation import evaluate_model
    from .dataset import load_split
    from .evaluation import format_table, metrics_row
    from .model import AblationVariant, AmodalModel, PipelineOptions
    from .shape_prior import ShapeCodebook

    model, extra = AmodalModel.load(args.checkpoint)
    cb = ShapeCodebook.load(args.codebook) if args.codebook else None
    trained = extra.get("train_config", {})
    options = PipelineOptions(
        variant=AblationVariant(args.variant or trained.get("variant", "ours")),
        visible_attention=trained.get("visible_attention", True),
        shape_prior_refine=trained.get("shape_prior_refine", True),
        reclass=trained.get("reclass", True),
        rescoring=not args.no_rescoring,
    )
    ds = load_split(args.data, args.split)
    rows = []
    for name, coarse in (("refined", False), ("coarse", True)):
        res = evaluate_model(model, ds, cb, options, use_gt_boxes=not args.proposals, coarse_only=coarse)
        rows.append({"masks": name, **metrics_row(res)})
    print(format_table(rows))
    if args.out:
        _write_metrics(rows, args.out)
        print(f"metrics -> {args.out}")
    return 0


def _ablate(args) -> int:
    from .ablation import load_grid, results_table, run_ablation, write_results

    grid = load_grid(args.grid)
    rows = run_ablation(grid)
    print(results_table(rows))
    out = args.out or grid.out_csv
    if out:
        write_results(rows, out)
        print(f"results -> {out}")
    return 0


def _visualize(args) -> int:
    from .dataset import load_split
    from .model import AmodalModel
    from .shape_prior import ShapeCodebook
    from .training import TrainConfig
    from .visualize import visualize_scene

    ds = load_split(args.data, args.split)
    by_id = {s.image_id: s for s in ds.scenes}
    if args.scene not in by_id:
        print(f"scene {args.scene} not in {args.split} split", file=sys.stderr)
        return 2
    model, extra = AmodalModel.load(args.checkpoint)
    cb = ShapeCodebook.load(args.codebook) if args.codebook else None
    cfg = TrainConfig.from_dict(extra["train_config"]) if "train_config" in extra else TrainConfig()
    for p in visualize_scene(by_id[args.scene], model, cb, cfg.options, args.out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amodalseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render a synthetic occluded-scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=500)
    g.add_argument("--n-val", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--categories", type=int, default=3)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=_generate)

    c = sub.add_parser("build-codebook", help="train the mask autoencoder and cluster its embeddings")
    c.add_argument("--data", required=True)
    c.add_argument("--k", type=int, default=64)
    c.add_argument("--dim", type=int, default=32)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--epochs", type=int, default=40)
    c.add_argument("--out", required=True)
    c.set_defaults(func=_build_codebook)

    t = sub.add_parser("train", help="train the segmentation model")
    t.add_argument("--data", required=True)
    t.add_argument("--codebook")
    t.add_argument("--config", help="YAML file of training options")
    t.add_argument("--out", required=True)
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="mask AP/AR on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--codebook")
    e.add_argument("--variant", choices=["ours", "both-self", "only-visible", "cross"])
    e.add_argument("--no-rescoring", action="store_true")
    e.add_argument("--split", default="val")
    e.add_argument("--proposals", action="store_true", help="use the proposal stage instead of GT boxes")
    e.add_argument("--out", help="metrics CSV path")
    e.set_defaults(func=_eval)

    a = sub.add_parser("ablate", help="train and evaluate a configuration grid")
    a.add_argument("--grid", required=True)
    a.add_argument("--out")
    a.set_defaults(func=_ablate)

    v = sub.add_parser("visualize", help="overlay PNGs for one scene")
    v.add_argument("--scene", type=int, required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--codebook")
    v.add_argument("--split", default="val")
    v.add_argument("--out", default="figures")
    v.set_defaults(func=_visualize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
