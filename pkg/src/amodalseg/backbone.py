"""Coarse mask stage: desk-scale backbone, ROI pooling, box/class head and mask heads."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

from .types import MASK_SIZE, ROI_SIZE, BoundingBox, RoiFeature

FEATURE_STRIDE = 4
BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
PIXEL_MEAN = 100.0
PIXEL_STD = 60.0


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    roi_channels: int = 64
    roi_size: int = ROI_SIZE
    use_gt_boxes: bool = True

    def __post_init__(self):
        if self.roi_channels < 8:
            raise ValueError("ROI feature channels must be >= 8")
        if len(self.widths) != 3 or any(w <= 0 for w in self.widths):
            raise ValueError(f"expected three positive stage widths, got {self.widths}")


class Backbone(nn.Module):
    """Three stride-2 conv stages with a top-down merge back to stride 4."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        stages, cin = [], 3
        for w in cfg.widths:
            stages.append(nn.Sequential(
                nn.Conv2d(cin, w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
                nn.Conv2d(w, w, 3, padding=1), nn.ReLU(inplace=True),
            ))
            cin = w
        self.stages = nn.ModuleList(stages)
        c = cfg.roi_channels
        self.lateral2 = nn.Conv2d(cfg.widths[1], c, 1)
        self.lateral3 = nn.Conv2d(cfg.widths[2], c, 1)
        self.smooth = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = (images - PIXEL_MEAN) / PIXEL_STD
        s1 = self.stages[0](x)
        s2 = self.stages[1](s1)
        s3 = self.stages[2](s2)
        top = F.interpolate(self.lateral3(s3), size=s2.shape[-2:], mode="nearest")
        return F.relu(self.smooth(self.lateral2(s2) + top))


def images_to_tensor(images) -> torch.Tensor:
    """H x W x 3 uint8 arrays -> B x 3 x H x W float tensor."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def pool_rois(features: torch.Tensor, boxes: list[torch.Tensor], size: int = ROI_SIZE) -> torch.Tensor:
    """ROI-align per-image boxes (x0, y0, x1, y1 in pixels) from a stride-4 map."""
    return roi_align(features, [b.to(features.dtype) for b in boxes], output_size=size,
                     spatial_scale=1.0 / FEATURE_STRIDE, sampling_ratio=2, aligned=True)


def crop_masks(masks: torch.Tensor, boxes: torch.Tensor, size: int = MASK_SIZE,
               binarize: bool = True) -> torch.Tensor:
    """Resample full-image masks (N x H x W) inside boxes (N x 4) to size x size."""
    if masks.shape[0] == 0:
        return masks.new_zeros((0, size, size))
    rois = torch.cat([torch.arange(len(boxes), dtype=boxes.dtype)[:, None], boxes], dim=1)
    out = roi_align(masks[:, None].to(boxes.dtype), rois, output_size=size, spatial_scale=1.0,
                    sampling_ratio=2, aligned=True)[:, 0]
    return (out >= 0.5).to(out.dtype) if binarize else out


def paste_mask(mask: np.ndarray, box: BoundingBox, image_size: tuple[int, int]) -> np.ndarray:
    """Place a box-relative probability mask onto the image canvas (bilinear)."""
    h, w = image_size
    out = np.zeros((h, w), dtype=np.float64)
    x0, y0 = int(np.floor(box.x_min)), int(np.floor(box.y_min))
    x1, y1 = int(np.ceil(box.x_max)), int(np.ceil(box.y_max))
    x0c, y0c, x1c, y1c = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
    if x1c <= x0c or y1c <= y0c:
        return out
    # sample the mask at pixel centers expressed in box-normalized coordinates
    xs = (np.arange(x0c, x1c) + 0.5 - box.x_min) / box.width * 2 - 1
    ys = (np.arange(y0c, y1c) + 0.5 - box.y_min) / box.height * 2 - 1
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    grid = torch.from_numpy(np.stack([gx, gy], axis=-1))[None]
    m = torch.tensor(np.asarray(mask, dtype=np.float64))[None, None]
    sampled = F.grid_sample(m, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    out[y0c:y1c, x0c:x1c] = sampled[0, 0].numpy()
    return out.clip(0.0, 1.0)


def encode_boxes(proposals: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    wx, wy, ww, wh = BOX_WEIGHTS
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return torch.stack([wx * (tx - px) / pw, wy * (ty - py) / ph,
                        ww * torch.log(tw / pw), wh * torch.log(th / ph)], dim=1)


def decode_boxes(proposals: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    wx, wy, ww, wh = BOX_WEIGHTS
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    dw = torch.clamp(deltas[:, 2] / ww, max=np.log(1000.0 / 16))
    dh = torch.clamp(deltas[:, 3] / wh, max=np.log(1000.0 / 16))
    cx = px + deltas[:, 0] / wx * pw
    cy = py + deltas[:, 1] / wy * ph
    w = pw * torch.exp(dw)
    h = ph * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


class MaskHead(nn.Module):
    """Four 3x3 convs and one stride-2 deconv, then a 1x1 mask predictor.

    The five intermediate activations (after ReLU) are the layers used for
    feature matching; the output is a logit map at twice the input size.
    """

    n_layers = 5

    def __init__(self, in_channels: int, width: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.convs = nn.ModuleList(
            [nn.Conv2d(in_channels if i == 0 else width, width, 3, padding=1) for i in range(4)])
        self.deconv = nn.ConvTranspose2d(width, width, 2, stride=2)
        self.predictor = nn.Conv2d(width, 1, 1)
        for m in [*self.convs, self.deconv]:
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)
        nn.init.normal_(self.predictor.weight, std=0.001)
        nn.init.zeros_(self.predictor.bias)

    def forward(self, x: torch.Tensor, return_activations: bool = False):
        acts = []
        for conv in self.convs:
            x = F.relu(conv(x))
            acts.append(x)
        x = F.relu(self.deconv(x))
        acts.append(x)
        logits = self.predictor(x)[:, 0]
        if return_activations:
            return logits, acts
        return logits


class BoxHead(nn.Module):
    """Class logits (background at index 0) and class-agnostic box deltas."""

    def __init__(self, in_channels: int, n_categories: int, hidden: int = 256, roi_size: int = ROI_SIZE):
        super().__init__()
        pooled = roi_size // 2
        self.pool = nn.AdaptiveAvgPool2d(pooled)
        self.fc1 = nn.Linear(in_channels * pooled * pooled, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, n_categories + 1)
        self.bbox = nn.Linear(hidden, 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.zeros_(self.cls.bias)
        nn.init.normal_(self.bbox.weight, std=0.001)
        nn.init.zeros_(self.bbox.bias)

    def forward(self, x: torch.Tensor):
        x = self.pool(x).flatten(1)
        x = F.relu(self.fc2(F.relu(self.fc1(x))))
        return self.cls(x), self.bbox(x)


@dataclass
class HeadOutputs:
    class_logits: torch.Tensor
    box_deltas: torch.Tensor
    amodal_logits: torch.Tensor
    visible_logits: torch.Tensor
    amodal_acts: list = field(default_factory=list, repr=False)
    visible_acts: list = field(default_factory=list, repr=False)

    @property
    def coarse_amodal(self) -> torch.Tensor:
        return torch.sigmoid(self.amodal_logits)

    @property
    def coarse_visible(self) -> torch.Tensor:
        return torch.sigmoid(self.visible_logits)


def pad_prior_channels(feats: torch.Tensor, n_extra: int) -> torch.Tensor:
    """Append n_extra all-zero channels so one amodal head serves both passes."""
    if n_extra == 0:
        return feats
    n, _, h, w = feats.shape
    return torch.cat([feats, feats.new_zeros((n, n_extra, h, w))], dim=1)


def coarse_forward(box_head: BoxHead, amodal_head: MaskHead, visible_head: MaskHead,
                   feats: torch.Tensor, activations: bool = True) -> HeadOutputs:
    """Coarse amodal / visible masks from the unmasked ROI features."""
    cls, deltas = box_head(feats)
    n_extra = amodal_head.in_channels - feats.shape[1]
    a_logits, a_acts = amodal_head(pad_prior_channels(feats, n_extra), return_activations=True)
    v_logits, v_acts = visible_head(feats, return_activations=True)
    if not activations:
        a_acts, v_acts = [], []
    return HeadOutputs(cls, deltas, a_logits, v_logits, a_acts, v_acts)


def _weighted_mean(per_instance: torch.Tensor, weights: torch.Tensor | None) -> torch.Tensor:
    if per_instance.numel() == 0:
        return per_instance.sum()
    if weights is not None:
        per_instance = per_instance * weights
    return per_instance.sum() / per_instance.shape[0]


def mask_bce(logits: torch.Tensor, target: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """(1/N) sum_i w_i * mean-over-pixels BCE(sigmoid(logits_i), target_i)."""
    per_pixel = F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype), reduction="none")
    return _weighted_mean(per_pixel.flatten(1).mean(dim=1), weights)


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.shape[0] == 0:
        return logits.sum()
    return F.cross_entropy(logits, labels)


def box_regression_loss(deltas: torch.Tensor, targets: torch.Tensor, beta: float = 1.0 / 9) -> torch.Tensor:
    if deltas.shape[0] == 0:
        return deltas.sum()
    return F.smooth_l1_loss(deltas, targets, beta=beta, reduction="sum") / deltas.shape[0]


def coarse_losses(outputs: HeadOutputs, labels: torch.Tensor, box_targets: torch.Tensor,
                  fg: torch.Tensor, gt_amodal: torch.Tensor, gt_visible: torch.Tensor) -> dict:
    """The four coarse-stage terms.

    ``fg`` indexes the foreground ROIs; mask and box terms use only those,
    the classification term uses every sampled ROI.
    """
    return {
        "cls": classification_loss(outputs.class_logits, labels),
        "reg": box_regression_loss(outputs.box_deltas[fg], box_targets),
        "amodal_coarse": mask_bce(outputs.amodal_logits[fg], gt_amodal),
        "visible_coarse": mask_bce(outputs.visible_logits[fg], gt_visible),
    }


def clip_boxes(boxes: np.ndarray, image_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Clip N x 4 boxes; returns (clipped, keep) where keep drops boxes under 1 px^2."""
    h, w = image_size
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    b[:, [0, 2]] = b[:, [0, 2]].clip(0, w)
    b[:, [1, 3]] = b[:, [1, 3]].clip(0, h)
    area = (b[:, 2] - b[:, 0]).clip(0) * (b[:, 3] - b[:, 1]).clip(0)
    return b, area >= 1.0


def extract_roi_features(backbone: Backbone, image: np.ndarray, boxes) -> list[RoiFeature]:
    """One C x 14 x 14 feature block per box; degenerate boxes are skipped with a warning."""
    h, w = image.shape[:2]
    raw = np.array([b.as_array() if isinstance(b, BoundingBox) else b for b in boxes],
                   dtype=np.float64).reshape(-1, 4)
    clipped, keep = clip_boxes(raw, (h, w))
    if not keep.all():
        warnings.warn(f"skipping {int((~keep).sum())} degenerate box(es) after clipping", stacklevel=2)
    clipped = clipped[keep]
    if len(clipped) == 0:
        return []
    with torch.no_grad():
        fmap = backbone(images_to_tensor(image))
        pooled = pool_rois(fmap, [torch.from_numpy(clipped).float()], backbone.cfg.roi_size)
    return [RoiFeature(p, BoundingBox.from_array(b)) for p, b in zip(pooled, clipped)]
