"""Domain types and mask algebra shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

ROI_SIZE = 14
MASK_SIZE = 28
BINARY_THRESHOLD = 0.5


class InvalidAnnotationError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mask:
    """Dense H x W grid with values in [0, 1].

    Ground-truth masks hold only {0, 1}; predictions hold probabilities.
    The grid is stored as a read-only float64 copy.
    """

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ShapeMismatchError(f"mask grid must be 2-D, got shape {g.shape}")
        if g.size and (np.isnan(g).any() or g.min() < 0.0 or g.max() > 1.0):
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "grid", _readonly(g))

    @property
    def resolution(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.grid == 0.0) | (self.grid == 1.0)))

    def binarize(self, threshold: float = BINARY_THRESHOLD) -> np.ndarray:
        return self.grid >= threshold

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(self.grid, other.grid)

    def __hash__(self):
        return hash((self.resolution, self.grid.tobytes()))

    @classmethod
    def zeros(cls, h: int, w: int) -> "Mask":
        return cls(np.zeros((h, w)))

    @classmethod
    def ones(cls, h: int, w: int) -> "Mask":
        return cls(np.ones((h, w)))


MaskLike = Union[Mask, np.ndarray]


def as_grid(m: MaskLike) -> np.ndarray:
    return m.grid if isinstance(m, Mask) else np.asarray(m, dtype=np.float64)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in continuous pixel coordinates (max edges exclusive)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def clip(self, height: int, width: int) -> "BoundingBox | None":
        """Clip to the image; returns None if nothing is left."""
        x0, x1 = max(0.0, self.x_min), min(float(width), self.x_max)
        y0, y1 = max(0.0, self.y_min), min(float(height), self.y_max)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def to_xywh(self) -> list[float]:
        return [float(self.x_min), float(self.y_min), float(self.width), float(self.height)]

    @classmethod
    def from_xywh(cls, xywh) -> "BoundingBox":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, x + w, y + h)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(*(float(v) for v in a))


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def tight_box(m: MaskLike, threshold: float = BINARY_THRESHOLD) -> BoundingBox | None:
    """Smallest box covering the binarized mask, or None for an empty mask."""
    b = as_grid(m) >= threshold
    ys = np.flatnonzero(b.any(axis=1))
    xs = np.flatnonzero(b.any(axis=0))
    if ys.size == 0:
        return None
    return BoundingBox(float(xs[0]), float(ys[0]), float(xs[-1] + 1), float(ys[-1] + 1))


@dataclass(frozen=True, eq=False)
class InstanceAnnotation:
    category_id: int
    box: BoundingBox
    amodal_mask: Mask
    visible_mask: Mask
    occlusion_rate: float

    def __post_init__(self):
        a, v = self.amodal_mask.grid, self.visible_mask.grid
        if a.shape != v.shape:
            raise ShapeMismatchError("amodal and visible masks differ in resolution")
        if np.any(v > a):
            raise InvalidAnnotationError("visible mask is not contained in amodal mask")
        if mask_area(a) <= 0:
            raise InvalidAnnotationError("amodal mask is empty")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise InvalidAnnotationError(f"occlusion rate {self.occlusion_rate} outside [0, 1]")

    @classmethod
    def from_masks(cls, category_id: int, amodal: MaskLike, visible: MaskLike) -> "InstanceAnnotation":
        a = amodal if isinstance(amodal, Mask) else Mask(amodal)
        v = visible if isinstance(visible, Mask) else Mask(visible)
        box = tight_box(a)
        if box is None:
            raise InvalidAnnotationError("amodal mask is empty")
        return cls(int(category_id), box, a, v, occlusion_rate(v, a))


@dataclass(frozen=True, eq=False)
class RoiFeature:
    """C x h x w feature block pooled for one region of interest."""

    data: torch.Tensor
    source_box: BoundingBox

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ShapeMismatchError(f"ROI feature must be C x h x w, got {tuple(self.data.shape)}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class Detection:
    box: BoundingBox
    category_id: int
    class_score: float
    amodal_mask: Mask
    visible_mask: Mask
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.class_score <= 1.0:
            raise ValueError(f"class score {self.class_score} outside [0, 1]")


def mask_area(m: MaskLike) -> float:
    return float(as_grid(m).sum())


def occlusion_rate(visible: MaskLike, amodal: MaskLike) -> float:
    amodal_area = mask_area(amodal)
    if amodal_area <= 0:
        raise InvalidAnnotationError("occlusion rate undefined for an empty amodal mask")
    rate = 1.0 - mask_area(visible) / amodal_area
    return float(min(1.0, max(0.0, rate)))


def mask_iou(a: MaskLike, b: MaskLike, threshold: float = BINARY_THRESHOLD) -> float:
    ga, gb = as_grid(a), as_grid(b)
    if ga.shape != gb.shape:
        raise ShapeMismatchError(f"resolution mismatch {ga.shape} vs {gb.shape}")
    ba, bb = ga >= threshold, gb >= threshold
    union = np.count_nonzero(ba | bb)
    if union == 0:
        return 1.0
    return np.count_nonzero(ba & bb) / union


def resize_grid(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with half-pixel centers; identity at equal size."""
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {target}")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape == (th, tw):
        return grid.copy()
    t = torch.tensor(grid)[None, None]
    out = F.interpolate(t, size=(th, tw), mode="bilinear", align_corners=False)
    return out[0, 0].numpy().clip(0.0, 1.0)


def resize_mask(m: MaskLike, target: tuple[int, int]) -> Mask:
    return Mask(resize_grid(as_grid(m), target))
