"""COCO-style dataset files extended with amodal and visible segmentations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .types import BoundingBox, InstanceAnnotation, Mask

FORMAT_VERSION = 1


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed COCO run-length encoding (column-major, starts with a zero run)."""
    b = np.asarray(mask, dtype=bool)
    flat = b.flatten(order="F").astype(np.int8)
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(b.shape[0]), int(b.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in rle["counts"]:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    return flat.reshape((h, w), order="F")


@dataclass
class Scene:
    image_id: int
    image: np.ndarray  # H x W x 3 uint8
    instances: list[InstanceAnnotation]
    file_name: str = ""

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass
class Dataset:
    scenes: list[Scene]
    categories: dict[int, str]

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    @property
    def category_ids(self) -> list[int]:
        return sorted(self.categories)

    def amodal_masks_by_category(self) -> dict[int, list[tuple[np.ndarray, BoundingBox]]]:
        out: dict[int, list] = {c: [] for c in self.categories}
        for scene in self.scenes:
            for inst in scene.instances:
                out[inst.category_id].append((inst.amodal_mask.grid, inst.box))
        return out


def annotations_to_coco(dataset: Dataset) -> dict:
    images, anns = [], []
    ann_id = 1
    for scene in dataset.scenes:
        h, w = scene.size
        images.append({"id": scene.image_id, "file_name": scene.file_name, "height": h, "width": w})
        for inst in scene.instances:
            anns.append({
                "id": ann_id,
                "image_id": scene.image_id,
                "category_id": inst.category_id,
                "bbox": inst.box.to_xywh(),
                "area": float(inst.amodal_mask.grid.sum()),
                "iscrowd": 0,
                "amodal_seg": rle_encode(inst.amodal_mask.grid >= 0.5),
                "visible_seg": rle_encode(inst.visible_mask.grid >= 0.5),
                "occlusion_rate": round(float(inst.occlusion_rate), 12),
            })
            ann_id += 1
    cats = [{"id": c, "name": n} for c, n in sorted(dataset.categories.items())]
    return {"info": {"format_version": FORMAT_VERSION}, "images": images, "annotations": anns,
            "categories": cats}


def coco_to_instances(coco: dict) -> dict[int, list[InstanceAnnotation]]:
    by_image: dict[int, list[InstanceAnnotation]] = {im["id"]: [] for im in coco["images"]}
    for ann in coco["annotations"]:
        amodal = Mask(rle_decode(ann["amodal_seg"]).astype(np.float64))
        visible = Mask(rle_decode(ann["visible_seg"]).astype(np.float64))
        by_image[ann["image_id"]].append(InstanceAnnotation(
            category_id=int(ann["category_id"]),
            box=BoundingBox.from_xywh(ann["bbox"]),
            amodal_mask=amodal,
            visible_mask=visible,
            occlusion_rate=float(ann["occlusion_rate"]),
        ))
    return by_image


def save_split(dataset: Dataset, root: str | Path, split: str) -> Path:
    """Write images/<split>/*.png and annotations/<split>.json under root."""
    root = Path(root)
    img_dir = root / "images" / split
    img_dir.mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for scene in dataset.scenes:
        if not scene.file_name:
            scene.file_name = f"{scene.image_id:06d}.png"
        Image.fromarray(scene.image).save(img_dir / scene.file_name, optimize=False)
    ann_path = root / "annotations" / f"{split}.json"
    ann_path.write_text(json.dumps(annotations_to_coco(dataset), sort_keys=True))
    return ann_path


def load_split(root: str | Path, split: str) -> Dataset:
    root = Path(root)
    coco = json.loads((root / "annotations" / f"{split}.json").read_text())
    by_image = coco_to_instances(coco)
    scenes = []
    for im in coco["images"]:
        image = np.asarray(Image.open(root / "images" / split / im["file_name"]).convert("RGB"))
        scenes.append(Scene(im["id"], image, by_image[im["id"]], im["file_name"]))
    cats = {c["id"]: c["name"] for c in coco["categories"]}
    return Dataset(scenes, cats)
