"""Joint training of the coarse and refinement stages."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .amodal import AMODAL_MASK_LOSSES, amodal_feature_matching
from .backbone import (
    BackboneConfig,
    box_regression_loss,
    classification_loss,
    crop_masks,
    encode_boxes,
    images_to_tensor,
    mask_bce,
    pool_rois,
)
from .dataset import Dataset
from .model import AblationVariant, AmodalModel, ModelConfig, PipelineOptions
from .types import box_iou, BoundingBox
from .visible import FeatureMatchConfig, feature_matching_loss, reclass_loss

logger = logging.getLogger(__name__)

TERMS = ("cls", "reg", "amodal_coarse", "visible_coarse", "amodal_refined", "visible_refined",
         "reclass", "amodal_fm", "visible_fm")
REFINED_TERMS = ("amodal_refined", "visible_refined", "reclass", "amodal_fm", "visible_fm")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 2000
    images_per_batch: int = 2
    fg_per_image: int = 2
    bg_per_image: int = 4
    seed: int = 0
    warmup_iters: int = 500
    toggles: dict = field(default_factory=lambda: {t: True for t in TERMS})
    layer_weights: tuple = FeatureMatchConfig().layer_weights
    reclass_weight: float = FeatureMatchConfig().reclass_weight
    variant: str = AblationVariant.OURS.value
    visible_attention: bool = True
    shape_prior_refine: bool = True
    reclass: bool = True
    rescoring: bool = True
    n_priors: int = 16           # k
    codebook_size: int = 64      # K
    embedding_dim: int = 32      # D
    roi_channels: int = 64
    head_width: int = 32
    box_jitter: float = 0.08
    amodal_mask_loss: str = "bce"  # or "ce2": two-class cross-entropy for the refined amodal term

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        if self.iterations < 1 or self.images_per_batch < 1:
            raise ValueError("iterations and batch size must be positive")
        unknown = set(self.toggles) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss toggles {sorted(unknown)}")
        full = {t: True for t in TERMS}
        full.update({k: bool(v) for k, v in self.toggles.items()})
        object.__setattr__(self, "toggles", full)
        object.__setattr__(self, "layer_weights", tuple(float(x) for x in self.layer_weights))
        AblationVariant(self.variant)
        if self.amodal_mask_loss not in AMODAL_MASK_LOSSES:
            raise ValueError(f"amodal_mask_loss must be one of {sorted(AMODAL_MASK_LOSSES)}")

    @property
    def options(self) -> PipelineOptions:
        return PipelineOptions(AblationVariant(self.variant), self.visible_attention, self.shape_prior_refine,
                               self.reclass, self.rescoring)

    def model_config(self, n_categories: int) -> ModelConfig:
        return ModelConfig(n_categories=n_categories,
                           backbone=BackboneConfig(roi_channels=self.roi_channels),
                           head_width=self.head_width, n_priors=self.n_priors)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_weights"] = list(d["layer_weights"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def load_train_config(path: str | Path) -> TrainConfig:
    """Read a ``key: value`` config file (YAML) into a TrainConfig."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    return TrainConfig.from_dict(data)


@dataclass
class InstanceWeights:
    """Per-instance amodal / visible weights in [0, 1]."""

    amodal: torch.Tensor
    visible: torch.Tensor


def _binary_iou(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    p, g = pred >= 0.5, gt >= 0.5
    inter = (p & g).flatten(1).sum(1).double()
    union = (p | g).flatten(1).sum(1).double()
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union))


def warmup_ramp(iteration: int, warmup_iters: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if warmup_iters <= 0:
        return 1.0
    return min(1.0, iteration / warmup_iters)


def compute_instance_weights(iteration: int, coarse_amodal: torch.Tensor, coarse_visible: torch.Tensor,
                             gt_amodal: torch.Tensor, gt_visible: torch.Tensor,
                             warmup_iters: int = 500) -> InstanceWeights:
    """ramp(iteration) x IoU(binarized coarse mask, GT), per task.

    The ramp grows linearly from 0 to 1 over the warm-up; the IoU factor
    trusts instances whose coarse masks are already good.
    """
    ramp = warmup_ramp(iteration, warmup_iters)
    qa = _binary_iou(coarse_amodal.detach(), gt_amodal).clamp(0, 1)
    qv = _binary_iou(coarse_visible.detach(), gt_visible).clamp(0, 1)
    dtype = coarse_amodal.dtype
    return InstanceWeights((ramp * qa).to(dtype), (ramp * qv).to(dtype))


@dataclass
class LossReport:
    terms: dict[str, float]
    total: torch.Tensor

    @property
    def total_value(self) -> float:
        return float(self.total.detach())


def total_loss(terms: dict[str, torch.Tensor], toggles: dict[str, bool] | None = None) -> LossReport:
    """Sum of the enabled terms; disabled or missing terms contribute exactly zero."""
    toggles = toggles or {}
    total = None
    report = {}
    for name in TERMS:
        value = terms.get(name)
        if value is None or not toggles.get(name, True):
            report[name] = 0.0
            continue
        v = value if torch.is_tensor(value) else torch.tensor(float(value), dtype=torch.float64)
        if not torch.isfinite(v).all():
            raise TrainingError(f"non-finite loss term {name!r}")
        report[name] = float(v.detach())
        total = v if total is None else total + v
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    return LossReport(report, total)


# ---------------------------------------------------------------- data prep


@dataclass
class _Prepared:
    images: torch.Tensor
    boxes: list[np.ndarray]
    cats: list[np.ndarray]
    amodal: list[torch.Tensor]
    visible: list[torch.Tensor]


def _prepare(dataset: Dataset) -> _Prepared:
    images = images_to_tensor([s.image for s in dataset.scenes])
    boxes, cats, am, vm = [], [], [], []
    for s in dataset.scenes:
        boxes.append(np.array([i.box.as_array() for i in s.instances]).reshape(-1, 4))
        cats.append(np.array([i.category_id for i in s.instances], dtype=np.int64))
        am.append(torch.from_numpy(np.stack([i.amodal_mask.grid for i in s.instances])).float())
        vm.append(torch.from_numpy(np.stack([i.visible_mask.grid for i in s.instances])).float())
    return _Prepared(images, boxes, cats, am, vm)


def _jitter(box: np.ndarray, rng, scale: float, size) -> np.ndarray:
    h, w = size
    bw, bh = box[2] - box[0], box[3] - box[1]
    for _ in range(10):
        j = box + rng.normal(0, scale, 4) * np.array([bw, bh, bw, bh])
        j = np.array([max(0.0, j[0]), max(0.0, j[1]), min(float(w), j[2]), min(float(h), j[3])])
        if j[2] - j[0] >= 2 and j[3] - j[1] >= 2 and \
                box_iou(BoundingBox.from_array(j), BoundingBox.from_array(box)) >= 0.6:
            return j
    return box.copy()


def _random_background(gt_boxes: np.ndarray, rng, size) -> np.ndarray | None:
    h, w = size
    gts = [BoundingBox.from_array(b) for b in gt_boxes]
    for _ in range(20):
        bw, bh = rng.uniform(8, 36, 2)
        x0, y0 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
        cand = BoundingBox(x0, y0, x0 + bw, y0 + bh)
        if all(box_iou(cand, g) < 0.3 for g in gts):
            return cand.as_array()
    return None


def sample_rois(prep: _Prepared, idx: int, cfg: TrainConfig, rng):
    """Foreground ROIs (jittered GT boxes) followed by background ROIs for one image."""
    size = tuple(prep.images.shape[-2:])
    gt_boxes, cats = prep.boxes[idx], prep.cats[idx]
    n_fg = min(cfg.fg_per_image, len(gt_boxes))
    chosen = np.sort(rng.choice(len(gt_boxes), n_fg, replace=False))
    fg = [gt_boxes[i] if rng.random() < 0.5 else _jitter(gt_boxes[i], rng, cfg.box_jitter, size)
          for i in chosen]
    bg = [b for b in (_random_background(gt_boxes, rng, size) for _ in range(cfg.bg_per_image))
          if b is not None]
    rois = np.array(fg + bg, dtype=np.float64).reshape(-1, 4)
    labels = np.concatenate([cats[chosen], np.zeros(len(bg), dtype=np.int64)])
    return rois, labels, chosen


@dataclass
class TrainResult:
    model: AmodalModel
    config: TrainConfig
    curves: list[tuple[int, str, float]]
    wall_time: float
    checkpoint: Path | None = None

    def term_curve(self, term: str) -> np.ndarray:
        return np.array([v for _, t, v in self.curves if t == term])


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average; entry i averages values[max(0, i-window+1) .. i]."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def compute_losses(model: AmodalModel, batch: dict, cfg: TrainConfig, iteration: int, codebook=None):
    """All loss terms for one prepared batch; disabled terms are not computed."""
    on = cfg.toggles
    options = cfg.options
    feats, labels, fg = batch["feats"], batch["labels"], batch["fg"]
    cls_logits, deltas = model.box_head(feats)
    feats_fg = feats[fg]
    gt_a, gt_v, cats = batch["gt_amodal"], batch["gt_visible"], labels[fg]
    coarse = model.coarse(feats_fg)
    terms: dict[str, torch.Tensor] = {}
    if on["cls"]:
        terms["cls"] = classification_loss(cls_logits, labels)
    if on["reg"]:
        terms["reg"] = box_regression_loss(deltas[fg], batch["box_targets"])
    if on["amodal_coarse"]:
        terms["amodal_coarse"] = mask_bce(coarse.amodal_logits, gt_a)
    if on["visible_coarse"]:
        terms["visible_coarse"] = mask_bce(coarse.visible_logits, gt_v)
    if not any(on[t] for t in REFINED_TERMS):
        return terms, None
    w = compute_instance_weights(iteration, coarse.coarse_amodal, coarse.coarse_visible, gt_a, gt_v,
                                 cfg.warmup_iters)
    ref = model.forward_rois(feats_fg, cats.tolist(), options, codebook, coarse=coarse)
    if on["visible_refined"]:
        terms["visible_refined"] = mask_bce(ref.visible_logits, gt_v, w.visible)
    if on["amodal_refined"]:
        terms["amodal_refined"] = AMODAL_MASK_LOSSES[cfg.amodal_mask_loss](ref.amodal_logits, gt_a, w.amodal)
    if on["reclass"] and ref.reclass_logits is not None:
        terms["reclass"] = reclass_loss(ref.reclass_logits, cats - 1, cfg.reclass_weight, w.visible)
    if on["visible_fm"]:
        terms["visible_fm"] = feature_matching_loss(coarse.visible_acts, ref.visible_acts, cfg.layer_weights,
                                                    w.visible)
    if on["amodal_fm"] and ref.amodal_attention is not None:
        terms["amodal_fm"] = amodal_feature_matching(model.amodal_head, feats_fg, ref.amodal_attention,
                                                     cfg.layer_weights, w.amodal, acts_ref=coarse.amodal_acts)
    return terms, w


def _make_batch(model: AmodalModel, prep: _Prepared, idxs, cfg: TrainConfig, rng) -> dict:
    fmap = model.backbone(prep.images[idxs])
    rois, labels, fg_boxes, gt_boxes, gt_a, gt_v = [], [], [], [], [], []
    for i in idxs:
        r, lab, chosen = sample_rois(prep, i, cfg, rng)
        rois.append(torch.from_numpy(r).float())
        labels.append(lab)
        n_fg = len(chosen)
        fb = torch.from_numpy(r[:n_fg]).float()
        fg_boxes.append(fb)
        gt_boxes.append(torch.from_numpy(prep.boxes[i][chosen]).float())
        gt_a.append(crop_masks(prep.amodal[i][chosen], fb))
        gt_v.append(crop_masks(prep.visible[i][chosen], fb))
    feats = pool_rois(fmap, rois, model.cfg.backbone.roi_size)
    labels = torch.from_numpy(np.concatenate(labels))
    fb, gb = torch.cat(fg_boxes), torch.cat(gt_boxes)
    return {
        "feats": feats,
        "labels": labels,
        "fg": torch.nonzero(labels > 0).flatten(),
        "box_targets": encode_boxes(fb, gb),
        "gt_amodal": torch.cat(gt_a),
        "gt_visible": torch.cat(gt_v),
    }


def check_codebook(dataset: Dataset, cfg: TrainConfig, codebook) -> None:
    if not cfg.options.uses_priors:
        return
    if codebook is None:
        raise TrainingError("shape-prior refinement is enabled but no codebook was given")
    missing = set(dataset.category_ids) - set(codebook.categories)
    if missing:
        raise TrainingError(f"codebook has no entries for dataset categories {sorted(missing)}")
    small = [c for c in dataset.category_ids if codebook.size(c) < cfg.n_priors]
    if small:
        raise TrainingError(f"codebook categories {small} hold fewer than k={cfg.n_priors} priors")


def train(dataset: Dataset, cfg: TrainConfig, codebook=None, out_dir: str | Path | None = None,
          log_every: int = 100) -> TrainResult:
    """SGD with momentum and weight decay over sampled ROI batches.

    Shape priors come from a frozen, pre-built codebook. Writes
    ``checkpoint.npz`` and ``loss_curves.csv`` into ``out_dir`` when given.
    """
    check_codebook(dataset, cfg, codebook)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = AmodalModel(cfg.model_config(len(dataset.categories)))
    if sorted(dataset.category_ids) != list(range(1, len(dataset.categories) + 1)):
        raise TrainingError("category ids must be 1..n")
    prep = _prepare(dataset)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    curves: list[tuple[int, str, float]] = []
    start = time.perf_counter()
    model.train()
    for it in range(cfg.iterations):
        idxs = rng.choice(len(dataset), cfg.images_per_batch, replace=False)
        batch = _make_batch(model, prep, idxs, cfg, rng)
        terms, _ = compute_losses(model, batch, cfg, it, codebook)
        report = total_loss(terms, cfg.toggles)
        opt.zero_grad(set_to_none=True)
        if report.total.requires_grad:
            report.total.backward()
        opt.step()
        for name in TERMS:
            curves.append((it, name, report.terms[name]))
        curves.append((it, "total", report.total_value))
        if log_every and (it + 1) % log_every == 0:
            logger.info("iter %d total %.4f amodal_coarse %.4f", it + 1, report.total_value,
                        report.terms["amodal_coarse"])
    model.eval()
    result = TrainResult(model, cfg, curves, time.perf_counter() - start)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = model.save(out_dir / "checkpoint.npz",
                                       extra={"train_config": cfg.to_dict(), "wall_time": result.wall_time})
        write_loss_curves(curves, out_dir / "loss_curves.csv")
    return result


def write_loss_curves(curves, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "term", "value"])
        for it, term, value in curves:
            w.writerow([it, term, repr(float(value))])
    return path


def read_loss_curves(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["term"], []).append(float(row["value"]))
    return {k: np.array(v) for k, v in out.items()}
