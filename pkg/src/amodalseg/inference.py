"""End-to-end inference: proposals, refinement, score fusion, shape-prior rescoring, NMS."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .backbone import FEATURE_STRIDE, clip_boxes, decode_boxes, images_to_tensor, paste_mask, pool_rois
from .model import AblationVariant, AmodalModel, PipelineOptions
from .types import BoundingBox, Detection, Mask, tight_box

ANCHOR_SIZES = (12.0, 20.0, 28.0, 40.0)
ANCHOR_RATIOS = (0.5, 1.0, 2.0)


class MissingCodebookError(ValueError):
    pass


def rescore(scores, similarities) -> np.ndarray:
    """Shape-prior post-process: class score times prior similarity."""
    return np.asarray(scores, dtype=np.float64) * np.asarray(similarities, dtype=np.float64)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clip(0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms_indices(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy NMS; equal scores keep input order. Returns kept indices, best first."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ious = box_iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_threshold
    return keep


def _nms_box(d: Detection) -> BoundingBox:
    return tight_box(d.amodal_mask) or d.box


def nms(detections: list[Detection], iou_threshold: float = 0.5, per_category: bool = True) -> list[Detection]:
    """NMS over amodal-mask tight boxes using each detection's final score."""
    if not detections:
        return []
    boxes = np.array([_nms_box(d).as_array() for d in detections])
    scores = np.array([d.class_score for d in detections])
    if not per_category:
        return [detections[i] for i in nms_indices(boxes, scores, iou_threshold)]
    cats = np.array([d.category_id for d in detections])
    keep = []
    for c in np.unique(cats):
        idx = np.flatnonzero(cats == c)
        keep.extend(idx[k] for k in nms_indices(boxes[idx], scores[idx], iou_threshold))
    keep = sorted(keep, key=lambda i: (-scores[i], i))
    return [detections[i] for i in keep]


def make_anchors(image_size: tuple[int, int]) -> np.ndarray:
    h, w = image_size
    ys = (np.arange(h // FEATURE_STRIDE) + 0.5) * FEATURE_STRIDE
    xs = (np.arange(w // FEATURE_STRIDE) + 0.5) * FEATURE_STRIDE
    shapes = [(s * np.sqrt(r), s / np.sqrt(r)) for s in ANCHOR_SIZES for r in ANCHOR_RATIOS]
    out = [(x - aw / 2, y - ah / 2, x + aw / 2, y + ah / 2) for y in ys for x in xs for aw, ah in shapes]
    return np.array(out, dtype=np.float64)


@dataclass
class BoxPredictions:
    boxes: np.ndarray            # N x 4
    categories: np.ndarray       # N, 1-based
    class_scores: np.ndarray     # N, main class head probability of the predicted category
    reclass_scores: np.ndarray   # N, 1.0 when the branch is off
    coarse_amodal: np.ndarray    # N x 28 x 28
    coarse_visible: np.ndarray
    refined_amodal: np.ndarray
    refined_visible: np.ndarray


def predict_boxes(model: AmodalModel, image: np.ndarray, boxes: np.ndarray, options: PipelineOptions,
                  codebook=None, fmap: torch.Tensor | None = None) -> BoxPredictions:
    """Run the coarse and refinement heads on fixed boxes (no proposal stage)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        z = np.zeros((0, 28, 28))
        return BoxPredictions(boxes, np.zeros(0, int), np.zeros(0), np.zeros(0), z, z, z, z)
    with torch.no_grad():
        if fmap is None:
            fmap = model.backbone(images_to_tensor(image))
        feats = pool_rois(fmap, [torch.from_numpy(boxes).float()], model.cfg.backbone.roi_size)
        coarse = model.coarse(feats)
        probs = torch.softmax(coarse.class_logits, dim=1)
        cats = probs[:, 1:].argmax(dim=1) + 1
        ref = model.forward_rois(feats, cats.tolist(), options, codebook, coarse=coarse)
        if ref.reclass_logits is not None:
            rc = torch.softmax(ref.reclass_logits, dim=1)[torch.arange(len(cats)), cats - 1].numpy()
        else:
            rc = np.ones(len(cats))
        return BoxPredictions(
            boxes, cats.numpy(), probs[torch.arange(len(cats)), cats].double().numpy(), rc.astype(np.float64),
            coarse.coarse_amodal.double().numpy(), coarse.coarse_visible.double().numpy(),
            ref.refined_amodal.double().numpy(), ref.refined_visible.double().numpy(),
        )


def propose(model: AmodalModel, image: np.ndarray, fmap: torch.Tensor, score_threshold: float = 0.05,
            pre_nms: float = 0.6, top_n: int = 30) -> np.ndarray:
    """Score anchors with the box head, regress them and keep the top survivors."""
    size = image.shape[:2]
    anchors = make_anchors(size)
    with torch.no_grad():
        feats = pool_rois(fmap, [torch.from_numpy(anchors).float()], model.cfg.backbone.roi_size)
        logits, deltas = model.box_head(feats)
        fg = 1.0 - torch.softmax(logits, dim=1)[:, 0]
        boxes = decode_boxes(torch.from_numpy(anchors).float(), deltas).double().numpy()
    fg = fg.double().numpy()
    boxes, valid = clip_boxes(boxes, size)
    valid &= fg >= score_threshold
    boxes, fg = boxes[valid], fg[valid]
    keep = nms_indices(boxes, fg, pre_nms)[:top_n]
    return boxes[keep]


def infer(image: np.ndarray, model: AmodalModel, codebook=None, variant=AblationVariant.OURS,
          options: PipelineOptions | None = None, proposals: np.ndarray | None = None,
          score_threshold: float = 0.05, nms_threshold: float = 0.5, similarity_norm: str = "l1") -> list[Detection]:
    """Detections for one image.

    ``options`` overrides ``variant`` when given. ``proposals`` fixes the ROI boxes (ground-truth-box mode); otherwise the
    anchor-based proposal stage runs. Scores are fused class x reclass,
    multiplied by the shape-prior similarity when rescoring is on, then NMS.
    """
    options = options or PipelineOptions(variant=AblationVariant(variant))
    if options.variant is AblationVariant.OURS and (options.uses_priors or options.rescoring) and codebook is None:
        raise MissingCodebookError("the full pipeline needs a shape-prior codebook")
    size = image.shape[:2]
    with torch.no_grad():
        fmap = model.backbone(images_to_tensor(image))
    if proposals is None:
        boxes = propose(model, image, fmap, score_threshold)
    else:
        boxes, keep = clip_boxes(np.asarray(proposals, dtype=np.float64), size)
        boxes = boxes[keep]
    if len(boxes) == 0:
        return []
    pred = predict_boxes(model, image, boxes, options, codebook, fmap)
    scores = pred.class_scores * pred.reclass_scores
    sims = np.ones(len(scores))
    if options.rescoring and codebook is not None:
        sims = codebook.similarity_batch(torch.from_numpy(pred.refined_amodal).float(), pred.categories.tolist(),
                                         similarity_norm)
    final = rescore(scores, sims)
    dets = []
    for i, b in enumerate(pred.boxes):
        box = BoundingBox.from_array(b)
        dets.append(Detection(
            box=box,
            category_id=int(pred.categories[i]),
            class_score=float(np.clip(final[i], 0.0, 1.0)),
            amodal_mask=Mask(paste_mask(pred.refined_amodal[i], box, size)),
            visible_mask=Mask(paste_mask(pred.refined_visible[i], box, size)),
            extras={
                "class_score": float(pred.class_scores[i]),
                "reclass_score": float(pred.reclass_scores[i]),
                "similarity": float(sims[i]),
                "coarse_amodal": pred.coarse_amodal[i],
                "coarse_visible": pred.coarse_visible[i],
            },
        ))
    if proposals is None:
        dets = [d for d in dets if d.class_score >= score_threshold]
    return nms(dets, nms_threshold)


def coarse_detections(dets: list[Detection], image_size) -> list[Detection]:
    """Same detections with the coarse masks swapped in for the refined ones."""
    out = []
    for d in dets:
        out.append(replace(d, amodal_mask=Mask(paste_mask(d.extras["coarse_amodal"], d.box, image_size)),
                           visible_mask=Mask(paste_mask(d.extras["coarse_visible"], d.box, image_size))))
    return out


def rescored_fixture(class_scores, similarities, boxes, category_id: int = 1, size=(64, 64),
                     nms_threshold: float = 0.5) -> list[Detection]:
    """Build detections from raw class scores and similarities, rescore and run NMS.

    Used to reproduce hand-constructed ranking scenarios without a model.
    """
    final = rescore(class_scores, similarities)
    dets = []
    for i, (s, b) in enumerate(zip(final, boxes)):
        box = BoundingBox.from_array(b)
        grid = np.zeros(size)
        grid[int(box.y_min):int(box.y_max), int(box.x_min):int(box.x_max)] = 1.0
        dets.append(Detection(box, category_id, float(s), Mask(grid), Mask(grid),
                              extras={"index": i, "class_score": float(class_scores[i]),
                                      "similarity": float(similarities[i])}))
    return nms(dets, nms_threshold)
