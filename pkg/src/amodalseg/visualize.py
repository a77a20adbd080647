"""Overlay figures: image, ground-truth amodal, coarse and refined predictions side by side."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import Scene  # noqa: E402

COLUMNS = ("image", "gt amodal", "coarse amodal", "refined amodal")
_COLORS = np.array([[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]],
                   dtype=np.float64)


def overlay(image: np.ndarray, masks, alpha: float = 0.5) -> np.ndarray:
    """Blend binarized masks over an RGB uint8 image; later masks paint over earlier ones."""
    out = image.astype(np.float64).copy()
    for i, m in enumerate(masks):
        sel = np.asarray(m) >= 0.5
        out[sel] = (1 - alpha) * out[sel] + alpha * _COLORS[i % len(_COLORS)]
    return out.clip(0, 255).astype(np.uint8)


def scene_panels(scene: Scene, detections) -> list[np.ndarray]:
    from .backbone import paste_mask

    gt = [i.amodal_mask.grid for i in scene.instances]
    coarse = [paste_mask(d.extras["coarse_amodal"], d.box, scene.size) for d in detections]
    refined = [d.amodal_mask.grid for d in detections]
    return [scene.image, overlay(scene.image, gt), overlay(scene.image, coarse), overlay(scene.image, refined)]


def save_panels(panels: list[np.ndarray], path: str | Path, title: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 2.6))
    for ax, img, name in zip(np.atleast_1d(axes), panels, COLUMNS):
        ax.imshow(img, interpolation="nearest")
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def visualize_scene(scene: Scene, model, codebook, options=None, out_dir: str | Path = ".",
                    use_gt_boxes: bool = True) -> list[Path]:
    """Write one PNG per column plus a combined strip; returns the written paths."""
    from PIL import Image

    from .inference import infer

    proposals = np.stack([i.box.as_array() for i in scene.instances]) if use_gt_boxes else None
    dets = infer(scene.image, model, codebook, options=options, proposals=proposals)
    panels = scene_panels(scene, dets)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for img, name in zip(panels, COLUMNS):
        p = out_dir / f"scene{scene.image_id:05d}_{name.replace(' ', '_')}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    paths.append(save_panels(panels, out_dir / f"scene{scene.image_id:05d}_strip.png", f"scene {scene.image_id}"))
    return paths
