"""Reference-scale ablation on the synthetic dataset, plus the occluder-swap probe.

Each model takes 2-3 minutes of CPU time to train. Models and codebooks are
cached, and the cache is shared with the acceptance suite, so after a full
`pytest` run the default invocation only evaluates.

    python3 demos/ablation.py                 # seed 0, four headline runs
    python3 demos/ablation.py --seeds 0 1 2 --all
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from amodalseg.ablation import build_shape_prior, default_grid, results_table, run_ablation, run_config, trained_model, with_runs
from amodalseg.evaluation import invariance_probe
from amodalseg.synthetic import SceneSpec, generate_splits, make_invariance_pairs
from amodalseg.training import TrainConfig

CACHE = Path(__file__).resolve().parents[1] / ".cache" / "acceptance"

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", type=int, nargs="+", default=[0])
ap.add_argument("--all", action="store_true", help="every row of the ablation table, not just the headline four")
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")
logging.getLogger("amodalseg.training").setLevel(logging.WARNING)

grid = default_grid(seeds=tuple(args.seeds), cache_dir=str(CACHE))
if not args.all:
    grid = with_runs(grid, ["full", "coarse-only", "no-shape-prior", "no-visible-attention"])
rows = run_ablation(grid)
print(results_table(rows))

# %% occluder swap: same target, different occluder; how much does the amodal mask move?
full = next(r for r in grid.runs if r.name == "full")
for seed in args.seeds:
    train_ds, _ = generate_splits(grid.data.n_train, grid.data.n_val, seed=seed)
    base = TrainConfig(seed=seed)
    codebook = build_shape_prior(train_ds, seed, base.codebook_size, base.embedding_dim,
                                 grid.autoencoder_epochs, CACHE)
    cfg = run_config(grid, full, seed)
    model, _ = trained_model(train_ds, cfg, codebook, CACHE)
    rep = invariance_probe(model.eval(), make_invariance_pairs(SceneSpec(seed=seed), 20), codebook, cfg.options)
    gain = np.mean([p["iou_full"] - p["iou_coarse"] for p in rep.per_pair])
    print(f"seed {seed}: swap IoU refined {rep.mean_iou_full:.4f}, coarse {rep.mean_iou_coarse:.4f} "
          f"(mean per-pair gain {gain:+.4f})")
