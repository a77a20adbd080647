"""Small end-to-end run: data, shape codebook, a short training run, evaluation.

Runs in about two minutes on a laptop CPU. The numbers are far from the reference
configuration (see the ablation demo for that); the point is the flow.

    python3 demos/quickstart.py
"""

import numpy as np
import torch

from amodalseg import TrainConfig, build_codebook, generate_splits, infer, train
from amodalseg.ablation import evaluate_model
from amodalseg.shape_prior import collect_amodal_crops, reconstruction_iou, train_autoencoder

torch.manual_seed(0)

# %% data: occluded parametric silhouettes with exact amodal ground truth
train_ds, val_ds = generate_splits(60, 10, seed=0)
occl = [i.occlusion_rate for s in train_ds.scenes for i in s.instances]
print(f"{len(train_ds.scenes)} train scenes, {len(occl)} instances, mean occlusion {np.mean(occl):.2f}")

# %% shape priors: autoencoder over 28x28 amodal crops, K-Means per category
crops = collect_amodal_crops(train_ds)
ae, hist = train_autoencoder(np.concatenate(list(crops.values())), epochs=15, dim=16)
print(f"autoencoder BCE {hist.epoch_bce[0]:.3f} -> {hist.epoch_bce[-1]:.3f}, "
      f"reconstruction IoU {reconstruction_iou(ae, crops[1]).mean():.3f}")
codebook = build_codebook(ae, crops, k=16)
print("codebook sizes:", {c: codebook.size(c) for c in codebook.categories})

# %% train briefly
cfg = TrainConfig(iterations=300, warmup_iters=100, codebook_size=16, embedding_dim=16)
result = train(train_ds, cfg, codebook)
print(f"trained {cfg.iterations} iterations in {result.wall_time:.0f}s")

# %% inference on one validation image, given its boxes
scene = val_ds.scenes[0]
boxes = np.stack([i.box.as_array() for i in scene.instances])
for d in infer(scene.image, result.model, codebook, proposals=boxes):
    print(f"  category {d.category_id} score {d.class_score:.3f} amodal area {(d.amodal_mask.grid >= 0.5).sum()} px")

# %% evaluation: refined masks against the coarse masks of the same model
# 300 iterations is too short for the refinement to pay off; the reference
# schedule (demos/ablation.py) is where it pulls ahead.
for label, coarse_only in (("refined", False), ("coarse", True)):
    res = evaluate_model(result.model, val_ds, codebook, cfg.options, coarse_only=coarse_only)
    print(f"{label:8s} amodal AP {100 * res['amodal']['AP']:.2f}  AP_occluded {100 * res['amodal']['AP_occluded']:.2f}")
