"""Synthetic occluded scenes with exact amodal / visible ground truth.

Shapes are parametric silhouettes, one family per category, placed with a
bounded random scale and rotation and stacked back to front. Because every
silhouette is rendered in full before compositing, the amodal mask of each
instance is exact and its visible mask is what the stack leaves uncovered.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from matplotlib.path import Path as MplPath
from scipy import ndimage

from .dataset import Dataset, Scene
from .types import InstanceAnnotation, Mask, occlusion_rate

DROP_OCCLUSION = 0.95
MAX_RETRIES = 50


class PlacementError(ValueError):
    pass


def _star(points=5, outer=1.0, inner=0.45):
    ang = np.arange(2 * points) * math.pi / points - math.pi / 2
    rad = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)


_POLYGONS = {
    "star": _star(),
    "lshape": np.array([[-0.8, -0.9], [-0.2, -0.9], [-0.2, 0.3], [0.8, 0.3], [0.8, 0.9], [-0.8, 0.9]]),
    "triangle": np.array([[0.0, -0.95], [0.85, 0.7], [-0.85, 0.7]]),
}

CAPSULE_RADIUS = 0.38
ELLIPSE_MINOR = 0.55


def _inside(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if kind == "ellipse":
        return u ** 2 + (v / ELLIPSE_MINOR) ** 2 <= 1.0
    if kind == "capsule":
        r = CAPSULE_RADIUS
        half = 1.0 - r
        du = np.clip(np.abs(u) - half, 0.0, None)
        return du ** 2 + v ** 2 <= r ** 2
    if kind == "roundrect":
        hx, hy, r = 0.95, 0.6, 0.25
        qx = np.clip(np.abs(u) - (hx - r), 0.0, None)
        qy = np.clip(np.abs(v) - (hy - r), 0.0, None)
        return qx ** 2 + qy ** 2 <= r ** 2
    if kind in _POLYGONS:
        path = MplPath(_POLYGONS[kind])
        pts = np.stack([u.ravel(), v.ravel()], axis=1)
        return path.contains_points(pts).reshape(u.shape)
    raise KeyError(f"unknown silhouette kind {kind!r}")


def capsule_area(scale: float) -> float:
    """Analytic area of a rendered capsule at the given scale (pixels^2)."""
    r = CAPSULE_RADIUS * scale
    length = 2 * (1.0 - CAPSULE_RADIUS) * scale
    return 2 * r * length + math.pi * r * r


@dataclass(frozen=True)
class ShapeTemplate:
    """A category-specific silhouette living in the unit disk of its local frame."""

    category_id: int
    kind: str
    scale_range: tuple[float, float] = (9.0, 14.0)
    rotation_range: tuple[float, float] = (-30.0, 30.0)

    @property
    def name(self) -> str:
        return self.kind


SHAPE_KINDS = ("ellipse", "capsule", "star", "lshape", "roundrect", "triangle")


def default_templates(n_categories: int = 3) -> list[ShapeTemplate]:
    if not 1 <= n_categories <= len(SHAPE_KINDS):
        raise ValueError(f"between 1 and {len(SHAPE_KINDS)} categories are available")
    return [ShapeTemplate(i + 1, kind) for i, kind in enumerate(SHAPE_KINDS[:n_categories])]


def render_template(t: ShapeTemplate, scale: float, rotation: float, position,
                    canvas: tuple[int, int] = (64, 64)) -> Mask:
    """Rasterize the full silhouette; rotation in degrees, position = (x, y) of the center."""
    h, w = canvas
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dx, dy = xs - position[0], ys - position[1]
    th = math.radians(rotation)
    c, s = math.cos(th), math.sin(th)
    u = (c * dx + s * dy) / scale
    v = (-s * dx + c * dy) / scale
    inside = _inside(t.kind, u, v)
    if not inside.any():
        raise PlacementError(f"{t.kind} at {position} lies entirely off the canvas")
    # thin tips can rasterize as detached pixels; keep the main body only
    labels, n = ndimage.label(inside)
    if n > 1:
        inside = labels == np.argmax(np.bincount(labels.ravel())[1:]) + 1
    return Mask(inside.astype(np.float64))


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int] = (64, 64)
    n_instances: tuple[int, int] = (2, 4)
    seed: int = 0
    texture: str = "mixed"  # "flat", "noise", "stripes" or "mixed"

    def __post_init__(self):
        if self.n_instances[0] < 1 or self.n_instances[1] < self.n_instances[0]:
            raise ValueError(f"bad instance count range {self.n_instances}")


@dataclass
class Placement:
    template: ShapeTemplate
    scale: float
    rotation: float
    position: tuple[float, float]
    color: np.ndarray
    texture: str = "flat"
    mask_override: np.ndarray | None = field(default=None, repr=False)

    def render(self, canvas) -> np.ndarray:
        if self.mask_override is not None:
            return self.mask_override.astype(bool)
        return render_template(self.template, self.scale, self.rotation, self.position, canvas).grid > 0


PALETTE = np.array([
    [220, 60, 60], [60, 200, 80], [70, 110, 230], [230, 200, 50], [200, 80, 210],
    [60, 210, 210], [240, 140, 40], [150, 150, 240], [160, 230, 120], [240, 240, 240],
], dtype=np.float64)
TEXTURES = ("flat", "noise", "stripes")


def _paint(img: np.ndarray, region: np.ndarray, color: np.ndarray, texture: str, rng) -> None:
    h, w = region.shape
    fill = np.broadcast_to(color, (h, w, 3)).astype(np.float64)
    if texture == "noise":
        fill = fill + rng.normal(0.0, 25.0, size=(h, w, 1))
    elif texture == "stripes":
        period = rng.uniform(3.0, 7.0)
        ang = rng.uniform(0, math.pi)
        ys, xs = np.mgrid[0:h, 0:w]
        wave = np.sin((xs * math.cos(ang) + ys * math.sin(ang)) * 2 * math.pi / period)
        fill = fill * (0.75 + 0.25 * wave)[..., None]
    img[region] = fill[region]


def _background(canvas, rng) -> np.ndarray:
    h, w = canvas
    return 40.0 + rng.normal(0.0, 8.0, size=(h, w, 3))


def composite_placements(canvas, placements: list[Placement], rng,
                         background: np.ndarray | None = None):
    """Stack placements back to front (first = bottom).

    Instances whose occlusion reaches DROP_OCCLUSION are removed from the scene
    entirely and the remaining stack is recomposited.
    Returns (image, annotations, kept placements).
    """
    masks = [p.render(canvas) for p in placements]
    keep = list(range(len(placements)))
    while True:
        visibles = _visible_masks([masks[i] for i in keep])
        rates = [occlusion_rate(v, masks[i]) for v, i in zip(visibles, keep)]
        drop = [i for i, r in zip(keep, rates) if r >= DROP_OCCLUSION]
        if not drop:
            break
        # remove the lowest such instance first; upper ones never gain occlusion from removals
        keep.remove(drop[0])
    img = _background(canvas, rng) if background is None else background.astype(np.float64).copy()
    anns = []
    for i, vis in zip(keep, visibles):
        p = placements[i]
        _paint(img, masks[i], p.color, p.texture, rng)
        anns.append(InstanceAnnotation.from_masks(p.template.category_id,
                                                  masks[i].astype(np.float64), vis.astype(np.float64)))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, anns, [placements[i] for i in keep]


def _visible_masks(masks: list[np.ndarray]) -> list[np.ndarray]:
    covered = np.zeros_like(masks[0], dtype=bool) if masks else None
    out = [None] * len(masks)
    for i in range(len(masks) - 1, -1, -1):
        out[i] = masks[i] & ~covered
        covered |= masks[i]
    return out


def _sample_texture(spec: SceneSpec, rng) -> str:
    if spec.texture == "mixed":
        return TEXTURES[rng.integers(len(TEXTURES))]
    return spec.texture


def sample_placement(t: ShapeTemplate, spec: SceneSpec, rng) -> Placement:
    h, w = spec.canvas
    scale = rng.uniform(*t.scale_range)
    rotation = rng.uniform(*t.rotation_range)
    margin = scale + 1.0
    if 2 * margin >= min(h, w):
        raise PlacementError("shape does not fit on the canvas")
    pos = (rng.uniform(margin, w - margin), rng.uniform(margin, h - margin))
    color = np.clip(PALETTE[rng.integers(len(PALETTE))] + rng.normal(0, 12, 3), 0, 255)
    return Placement(t, scale, rotation, pos, color, _sample_texture(spec, rng))


def _near(anchor: Placement, p: Placement, spec: SceneSpec, rng) -> tuple[float, float]:
    """Position p so that it tends to overlap anchor while staying on the canvas."""
    h, w = spec.canvas
    dist = rng.uniform(0.6, 1.5) * (anchor.scale + p.scale) / 2
    ang = rng.uniform(0, 2 * math.pi)
    margin = p.scale + 1.0
    x = min(max(anchor.position[0] + dist * math.cos(ang), margin), w - margin)
    y = min(max(anchor.position[1] + dist * math.sin(ang), margin), h - margin)
    return (x, y)


def _scene_rng(seed: int, stream: int, index: int):
    return np.random.default_rng([seed, stream, index])


def composite_scene(spec: SceneSpec, templates: list[ShapeTemplate], index: int = 0, stream: int = 0):
    """Generate one scene; returns (image, annotations)."""
    if not templates:
        raise ValueError("at least one template is required")
    rng = _scene_rng(spec.seed, stream, index)
    n = int(rng.integers(spec.n_instances[0], spec.n_instances[1] + 1))
    placements = []
    for _ in range(n):
        t = templates[rng.integers(len(templates))]
        anchor = placements[rng.integers(len(placements))] if placements and rng.random() < 0.7 else None
        for _attempt in range(MAX_RETRIES):
            try:
                p = sample_placement(t, spec, rng)
                if anchor is not None:
                    p.position = _near(anchor, p, spec, rng)
                placements.append(p)
                break
            except PlacementError:
                continue
    image, anns, _ = composite_placements(spec.canvas, placements, rng)
    return image, anns


def _scene_job(args):
    spec, templates, index, stream = args
    image, anns = composite_scene(spec, templates, index, stream)
    return Scene(index, image, anns, f"{index:06d}.png")


def generate_dataset(spec: SceneSpec, templates: list[ShapeTemplate], n_scenes: int,
                     stream: int = 0, n_workers: int = 1) -> Dataset:
    jobs = [(spec, templates, i, stream) for i in range(n_scenes)]
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            scenes = list(pool.map(_scene_job, jobs, chunksize=8))
    else:
        scenes = [_scene_job(j) for j in jobs]
    scenes = [s for s in scenes if s.instances]
    return Dataset(scenes, {t.category_id: t.name for t in templates})


def generate_splits(n_train: int, n_val: int, seed: int = 0, n_categories: int = 3,
                    spec: SceneSpec | None = None, n_workers: int = 1) -> tuple[Dataset, Dataset]:
    spec = replace(spec or SceneSpec(), seed=seed)
    templates = default_templates(n_categories)
    train = generate_dataset(spec, templates, n_train, stream=0, n_workers=n_workers)
    val = generate_dataset(spec, templates, n_val, stream=1, n_workers=n_workers)
    return train, val


@dataclass
class InvariancePair:
    """Two scenes sharing the target, its visible region and the background.

    Only the occluder differs: its category, color and texture, and its
    silhouette outside the target.
    """

    scene_a: Scene
    scene_b: Scene
    target_index: int = 0
    occluder_categories: tuple[int, int] = (0, 0)


def make_invariance_pairs(spec: SceneSpec, n_pairs: int, templates: list[ShapeTemplate] | None = None,
                          occlusion_range=(0.2, 0.6), stream: int = 2) -> list[InvariancePair]:
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    templates = templates or default_templates(3)
    if len(templates) < 2:
        raise ValueError("occluder swaps need at least two templates")
    pairs = []
    index = 0
    while len(pairs) < n_pairs:
        rng = _scene_rng(spec.seed, stream, index)
        index += 1
        target_t = templates[rng.integers(len(templates))]
        cat_a, cat_b = rng.choice(len(templates), size=2, replace=False)
        occ_a_t, occ_b_t = templates[cat_a], templates[cat_b]
        target = sample_placement(target_t, spec, rng)
        target.texture = "flat"
        target_mask = target.render(spec.canvas)

        occ_a = sample_placement(occ_a_t, spec, rng)
        # pull the occluder toward the target so it overlaps
        frac = rng.uniform(0.35, 0.75)
        occ_a.position = (target.position[0] + frac * (occ_a.position[0] - target.position[0]),
                          target.position[1] + frac * (occ_a.position[1] - target.position[1]))
        try:
            mask_a = occ_a.render(spec.canvas)
        except PlacementError:
            continue
        rate = (mask_a & target_mask).sum() / target_mask.sum()
        if not occlusion_range[0] <= rate <= occlusion_range[1]:
            continue

        occ_b = sample_placement(occ_b_t, spec, rng)
        occ_b.position = occ_a.position
        occ_b.texture = TEXTURES[(TEXTURES.index(occ_a.texture) + 1) % len(TEXTURES)]
        occ_b.color = np.clip(255.0 - occ_a.color, 0, 255)
        try:
            sil_b = occ_b.render(spec.canvas)
        except PlacementError:
            continue
        occ_b.mask_override = (sil_b & ~target_mask) | (mask_a & target_mask)
        occ_a.mask_override = mask_a

        bg = _background(spec.canvas, rng)
        paint_seed = int(rng.integers(2 ** 31))
        scenes = []
        for occ in (occ_a, occ_b):
            image, anns, kept = composite_placements(spec.canvas, [target, occ],
                                                     np.random.default_rng(paint_seed), background=bg)
            if len(kept) != 2:
                break
            scenes.append(Scene(len(pairs), image, anns, f"pair{len(pairs):04d}.png"))
        if len(scenes) != 2:
            continue
        pairs.append(InvariancePair(scenes[0], scenes[1], 0,
                                    (occ_a_t.category_id, occ_b_t.category_id)))
    return pairs
