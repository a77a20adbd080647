"""COCO-protocol mask AP / AR on amodal and visible masks, plus the occluder-swap probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .types import Detection, InstanceAnnotation, mask_iou

COCO_IOU_THRESHOLDS = tuple(np.linspace(0.5, 0.95, 10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = COCO_IOU_THRESHOLDS
    occlusion_cutoff: float = 0.15
    nms_threshold: float = 0.5
    score_threshold: float = 0.05
    max_detections: int = 100
    match_on: str = "amodal"

    def __post_init__(self):
        for t in (*self.iou_thresholds, self.occlusion_cutoff, self.nms_threshold):
            if not 0.0 < t < 1.0:
                raise ValueError(f"threshold {t} outside (0, 1)")
        if self.match_on not in ("amodal", "visible"):
            raise ValueError(f"match_on must be 'amodal' or 'visible', got {self.match_on!r}")


def _mask_ious(dets: list[Detection], gts: list[InstanceAnnotation], side: str) -> np.ndarray:
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        dm = d.amodal_mask if side == "amodal" else d.visible_mask
        if not dm.binarize().any():
            continue
        for j, g in enumerate(gts):
            gm = g.amodal_mask if side == "amodal" else g.visible_mask
            out[i, j] = mask_iou(dm, gm)
    return out


def match_image(ious: np.ndarray, gt_ignore: np.ndarray, threshold: float):
    """Greedy matching of score-ordered detections for one image and category.

    Ground truths must be ordered with ignored ones last. Returns (det_match,
    det_ignore): the matched GT index per detection (-1 if none) and whether
    the detection matched an ignored GT.
    """
    n_det, n_gt = ious.shape
    gt_taken = np.zeros(n_gt, dtype=bool)
    det_match = -np.ones(n_det, dtype=int)
    det_ignore = np.zeros(n_det, dtype=bool)
    for d in range(n_det):
        best = min(threshold, 1 - 1e-10)
        m = -1
        for g in range(n_gt):
            if gt_taken[g]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if ious[d, g] < best:
                continue
            best = ious[d, g]
            m = g
        if m == -1:
            continue
        det_match[d] = m
        det_ignore[d] = gt_ignore[m]
        gt_taken[m] = True
    return det_match, det_ignore


def interpolated_precision(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> tuple[float, float]:
    """101-point interpolated AP and final recall from score-ordered TP / FP flags."""
    tps = np.cumsum(tp).astype(np.float64)
    fps = np.cumsum(fp).astype(np.float64)
    if len(tps) == 0:
        return 0.0, 0.0
    rc = tps / n_gt
    pr = tps / np.maximum(tps + fps, np.spacing(1))
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    q = np.zeros(len(RECALL_POINTS))
    inds = np.searchsorted(rc, RECALL_POINTS, side="left")
    valid = inds < len(pr)
    q[valid] = pr[inds[valid]]
    return float(q.mean()), float(rc[-1])


def coco_tables(dets_by_image: dict, gts_by_image: dict, side: str, cfg: EvalConfig,
                gt_filter=None) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall tables (thresholds x categories); -1 marks categories without GT.

    ``gt_filter(annotation) -> bool`` keeps a GT active; the rest are ignored
    (detections matched to them neither help nor hurt).
    """
    cats = sorted({g.category_id for gs in gts_by_image.values() for g in gs}
                  | {d.category_id for ds in dets_by_image.values() for d in ds})
    n_t = len(cfg.iou_thresholds)
    precision = -np.ones((n_t, len(cats)))
    recall = -np.ones((n_t, len(cats)))
    images = sorted(set(gts_by_image) | set(dets_by_image))
    for ci, c in enumerate(cats):
        per_image = []
        n_active = 0
        for img in images:
            gts = [g for g in gts_by_image.get(img, []) if g.category_id == c]
            ignore = np.array([gt_filter is not None and not gt_filter(g) for g in gts], dtype=bool)
            order = np.argsort(ignore, kind="stable")
            gts = [gts[i] for i in order]
            ignore = ignore[order]
            n_active += int((~ignore).sum())
            dets = [d for d in dets_by_image.get(img, []) if d.category_id == c]
            scores = np.array([d.class_score for d in dets])
            dorder = np.argsort(-scores, kind="mergesort")[:cfg.max_detections]
            dets = [dets[i] for i in dorder]
            per_image.append((np.array([d.class_score for d in dets]), _mask_ious(dets, gts, side), ignore))
        if n_active == 0:
            continue
        for ti, t in enumerate(cfg.iou_thresholds):
            scores, tp, fp = [], [], []
            for s, ious, ignore in per_image:
                match, dig = match_image(ious, ignore, t)
                scores.append(s)
                tp.append((match >= 0) & ~dig)
                fp.append((match < 0) & ~dig)
            s = np.concatenate(scores) if scores else np.zeros(0)
            order = np.argsort(-s, kind="mergesort")
            tp_all = np.concatenate(tp)[order] if tp else np.zeros(0, bool)
            fp_all = np.concatenate(fp)[order] if fp else np.zeros(0, bool)
            precision[ti, ci], recall[ti, ci] = interpolated_precision(tp_all, fp_all, n_active)
    return precision, recall


def _mean_valid(a: np.ndarray) -> float:
    v = a[a > -1]
    return float(v.mean()) if v.size else -1.0


def _summarize(precision: np.ndarray, recall: np.ndarray, cfg: EvalConfig) -> dict:
    th = np.asarray(cfg.iou_thresholds)
    out = {"AP": _mean_valid(precision), "AR": _mean_valid(recall)}
    for name, t in (("AP50", 0.5), ("AP75", 0.75)):
        idx = np.flatnonzero(np.isclose(th, t))
        out[name] = _mean_valid(precision[idx]) if idx.size else -1.0
    return out


def _as_gt_dict(gt) -> dict:
    if isinstance(gt, Dataset):
        return {s.image_id: s.instances for s in gt.scenes}
    return dict(gt)


def evaluate(detections: dict, gt, cfg: EvalConfig | None = None) -> dict:
    """Mask AP/AP50/AP75/AR on amodal and on visible masks, plus amodal AP(Occluded).

    ``detections`` maps image id -> list of Detection; ``gt`` is a Dataset or
    a mapping image id -> list of InstanceAnnotation.
    """
    cfg = cfg or EvalConfig()
    gts = _as_gt_dict(gt)
    result = {}
    for side in ("amodal", "visible"):
        p, r = coco_tables(detections, gts, side, cfg)
        result[side] = _summarize(p, r, cfg)
    p, r = coco_tables(detections, gts, "amodal", cfg,
                       gt_filter=lambda g: g.occlusion_rate > cfg.occlusion_cutoff)
    occ = _summarize(p, r, cfg)
    result["amodal"]["AP_occluded"] = occ["AP"]
    result["amodal"]["AR_occluded"] = occ["AR"]
    return result


def metrics_row(result: dict) -> dict:
    """Flatten an evaluate() result into the ablation table columns."""
    a, v = result["amodal"], result["visible"]
    return {"AP": a["AP"], "AP50": a["AP50"], "AP75": a["AP75"], "AR": a["AR"],
            "AP_occluded": a["AP_occluded"], "visible_AP": v["AP"], "visible_AR": v["AR"]}


def format_table(rows: list[dict], columns: list[str] | None = None) -> str:
    if not rows:
        return "(empty)"
    columns = columns or list(rows[0])

    def fmt(v):
        return f"{100 * v:.2f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = [" | ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(x.ljust(w) for x, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


# ---------------------------------------------------------------- occluder-swap probe


@dataclass
class ProbeReport:
    n_pairs: int
    n_skipped: int
    mean_iou_full: float
    mean_iou_coarse: float
    per_pair: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"n_pairs": self.n_pairs, "n_skipped": self.n_skipped, "mean_iou_full": self.mean_iou_full,
                "mean_iou_coarse": self.mean_iou_coarse}


def invariance_probe(model, pairs, codebook=None, options=None, use_gt_boxes: bool = True,
                     match_iou: float = 0.5) -> ProbeReport:
    """Agreement of the target's predicted amodal masks across occluder-swapped scenes.

    With ``use_gt_boxes`` the target's box is the only proposal; otherwise the
    full detector runs and the detection best overlapping the target is used.
    """
    from .backbone import paste_mask
    from .inference import infer, predict_boxes
    from .model import PipelineOptions
    from .types import box_iou

    options = options or PipelineOptions()
    per_pair, skipped = [], 0
    for k, pair in enumerate(pairs):
        full, coarse = [], []
        for scene in (pair.scene_a, pair.scene_b):
            target = scene.instances[pair.target_index]
            size = scene.size
            if use_gt_boxes:
                pred = predict_boxes(model, scene.image, target.box.as_array()[None], options, codebook)
                full.append(paste_mask(pred.refined_amodal[0], target.box, size))
                coarse.append(paste_mask(pred.coarse_amodal[0], target.box, size))
                continue
            dets = infer(scene.image, model, codebook, options=options)
            best = max(dets, key=lambda d: box_iou(d.box, target.box), default=None)
            if best is None or box_iou(best.box, target.box) < match_iou:
                break
            full.append(best.amodal_mask.grid)
            coarse.append(paste_mask(best.extras["coarse_amodal"], best.box, size))
        if len(full) != 2:
            skipped += 1
            continue
        per_pair.append({"pair": k, "iou_full": mask_iou(full[0], full[1]),
                         "iou_coarse": mask_iou(coarse[0], coarse[1])})
    mf = float(np.mean([p["iou_full"] for p in per_pair])) if per_pair else float("nan")
    mc = float(np.mean([p["iou_coarse"] for p in per_pair])) if per_pair else float("nan")
    return ProbeReport(len(pairs), skipped, mf, mc, per_pair)
