"""Shape-prior memory: mask autoencoder, per-category K-Means codebook and retrieval."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .types import MASK_SIZE, MaskLike, ShapeMismatchError, as_grid

logger = logging.getLogger(__name__)

CODEBOOK_VERSION = 1


class CodebookError(ValueError):
    pass


class MaskAutoencoder(nn.Module):
    """28x28 mask <-> D-dim embedding; two strided convs down, two deconvs up."""

    def __init__(self, dim: int = 32, width: int = 32, size: int = MASK_SIZE):
        super().__init__()
        if size % 4:
            raise ValueError("mask size must be divisible by 4")
        self.dim, self.size = dim, size
        s = size // 4
        self._grid = (width, s, s)
        self.enc = nn.Sequential(
            nn.Conv2d(1, width // 2, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width // 2, width, 4, stride=2, padding=1), nn.ReLU(),
        )
        self.to_z = nn.Linear(width * s * s, dim)
        self.from_z = nn.Linear(dim, width * s * s)
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(width, width // 2, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(width // 2, 1, 4, stride=2, padding=1),
        )

    def encode(self, masks: torch.Tensor) -> torch.Tensor:
        masks = masks.to(self.to_z.weight.dtype)
        return self.to_z(self.enc(masks[:, None]).flatten(1))

    def decode_logits(self, z: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.from_z(z.to(self.from_z.weight.dtype))).view(-1, *self._grid)
        return self.dec(h)[:, 0]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decode_logits(z))

    def forward(self, masks: torch.Tensor) -> torch.Tensor:
        return self.decode_logits(self.encode(masks))


def _reconstruction_bce(ae: MaskAutoencoder, masks: torch.Tensor, batch: int = 512) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(masks), batch):
            m = masks[i:i + batch]
            total += F.binary_cross_entropy_with_logits(ae(m), m, reduction="sum").item()
    return total / masks.numel()


@dataclass
class AutoencoderHistory:
    epoch_bce: list[float] = field(default_factory=list)


def train_autoencoder(masks, epochs: int = 40, seed: int = 0, dim: int = 32, lr: float = 2e-3,
                      batch_size: int = 64) -> tuple[MaskAutoencoder, AutoencoderHistory]:
    """Fit the autoencoder on binary 28x28 amodal masks (N x 28 x 28).

    Adam with a cosine-decayed step size; the reported history is the
    full-set reconstruction BCE measured after each epoch.
    """
    masks = torch.as_tensor(np.asarray(masks), dtype=torch.float32)
    if masks.ndim != 3 or len(masks) == 0:
        raise CodebookError("autoencoder training needs a non-empty N x H x W mask stack")
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    ae = MaskAutoencoder(dim=dim, size=masks.shape[-1])
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
    hist = AutoencoderHistory()
    for epoch in range(epochs):
        order = torch.randperm(len(masks), generator=gen)
        for i in range(0, len(masks), batch_size):
            m = masks[order[i:i + batch_size]]
            loss = F.binary_cross_entropy_with_logits(ae(m), m)
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
        hist.epoch_bce.append(_reconstruction_bce(ae, masks))
        logger.debug("autoencoder epoch %d bce %.4f", epoch, hist.epoch_bce[-1])
    ae.eval()
    for p in ae.parameters():
        p.requires_grad_(False)
    return ae, hist


def reconstruction_iou(ae: MaskAutoencoder, masks) -> np.ndarray:
    masks = torch.as_tensor(np.asarray(masks), dtype=torch.float32)
    with torch.no_grad():
        rec = ae.decode(ae.encode(masks)) >= 0.5
    gt = masks >= 0.5
    inter = (rec & gt).flatten(1).sum(1).double()
    union = (rec | gt).flatten(1).sum(1).double()
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union)).numpy()


def collect_amodal_crops(dataset, size: int = MASK_SIZE) -> dict[int, np.ndarray]:
    """Ground-truth amodal masks cropped to their boxes and resampled to size x size."""
    from .backbone import crop_masks

    out: dict[int, list] = {c: [] for c in dataset.categories}
    for scene in dataset.scenes:
        if not scene.instances:
            continue
        masks = torch.from_numpy(np.stack([i.amodal_mask.grid for i in scene.instances])).float()
        boxes = torch.from_numpy(np.stack([i.box.as_array() for i in scene.instances])).float()
        crops = crop_masks(masks, boxes, size).numpy()
        for inst, crop in zip(scene.instances, crops):
            out[inst.category_id].append(crop)
    return {c: np.array(v, dtype=np.float32).reshape(-1, size, size) for c, v in out.items()}


# ---------------------------------------------------------------- K-Means


def kmeans_plusplus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers, dtype=np.float64)


def _assign(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    labels = d2.argmin(axis=1)  # lowest index on ties
    return labels, d2[np.arange(len(x)), labels]


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    objective: float
    n_iter: int
    converged: bool
    objective_history: list[float]


def lloyd_kmeans(x: np.ndarray, init: np.ndarray, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations from the given centers until the assignment stops changing.

    An empty cluster keeps its previous center.
    """
    x = np.asarray(x, dtype=np.float64)
    centers = np.array(init, dtype=np.float64, copy=True)
    labels, d2 = _assign(x, centers)
    history = [float(d2.sum())]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
        new_labels, d2 = _assign(x, centers)
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
    return KMeansResult(centers, labels, float(d2.sum()), it, converged, history)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return lloyd_kmeans(x, kmeans_plusplus_init(x, k, rng), max_iter)


# ---------------------------------------------------------------- codebook


@dataclass(frozen=True)
class PriorSearchResult:
    masks: np.ndarray      # k x H x W decoded priors, nearest first
    distances: np.ndarray  # k Euclidean distances in embedding space
    indices: np.ndarray    # k centroid indices


class ShapeCodebook:
    """Per-category centroid embeddings plus the autoencoder that maps them to masks.

    The autoencoder only needs ``encode`` (N x H x W -> N x D) and ``decode``
    (N x D -> N x H x W in [0, 1]); centroids and their decoded masks are
    stored read-only.
    """

    def __init__(self, autoencoder, centroids: dict[int, np.ndarray], metadata: dict | None = None):
        self.autoencoder = autoencoder
        self._centroids: dict[int, np.ndarray] = {}
        self._decoded: dict[int, np.ndarray] = {}
        for cat, c in centroids.items():
            c = np.array(c, dtype=np.float64, copy=True)
            c.setflags(write=False)
            self._centroids[int(cat)] = c
            with torch.no_grad():
                dec = autoencoder.decode(torch.tensor(c, dtype=torch.float32)).double().numpy()
            dec.setflags(write=False)
            self._decoded[int(cat)] = dec
        dims = {c.shape[1] for c in self._centroids.values()}
        if len(dims) > 1:
            raise CodebookError(f"centroid dimensions disagree: {dims}")
        self.metadata = dict(metadata or {})
        self._decoded_t = {c: torch.tensor(d, dtype=torch.float32) for c, d in self._decoded.items()}

    @property
    def categories(self) -> list[int]:
        return sorted(self._centroids)

    @property
    def dim(self) -> int:
        return next(iter(self._centroids.values())).shape[1]

    def centroids(self, category_id: int) -> np.ndarray:
        return self._centroids[self._check(category_id)]

    def decoded(self, category_id: int) -> np.ndarray:
        return self._decoded[self._check(category_id)]

    def size(self, category_id: int) -> int:
        return len(self.centroids(category_id))

    def storage_digest(self) -> str:
        h = hashlib.sha256()
        for cat in self.categories:
            h.update(str(cat).encode())
            h.update(self._centroids[cat].tobytes())
        return h.hexdigest()

    def _check(self, category_id: int) -> int:
        if int(category_id) not in self._centroids:
            raise CodebookError(f"no codebook entry for category {category_id}")
        return int(category_id)

    def encode(self, masks) -> np.ndarray:
        t = torch.as_tensor(np.asarray(masks, dtype=np.float32))
        with torch.no_grad():
            return self.autoencoder.encode(t).double().numpy()

    def search_embedding(self, z: np.ndarray, category_id: int, k: int) -> PriorSearchResult:
        cents = self.centroids(category_id)
        if not 1 <= k <= len(cents):
            raise CodebookError(f"k={k} outside [1, {len(cents)}] for category {category_id}")
        d = np.sqrt(((cents - np.asarray(z, dtype=np.float64)[None]) ** 2).sum(1))
        order = np.argsort(d, kind="stable")[:k]
        return PriorSearchResult(self._decoded[int(category_id)][order].copy(), d[order], order)

    def search(self, mask: MaskLike, category_id: int, k: int) -> PriorSearchResult:
        """Decoded masks of the k centroids nearest to the mask's embedding."""
        self._check(category_id)
        grid = as_grid(mask)
        return self.search_embedding(self.encode(grid[None])[0], category_id, k)

    def search_batch(self, masks: torch.Tensor, category_ids, k: int) -> torch.Tensor:
        """N x H x W masks -> N x k x H x W decoded priors (no gradient)."""
        n = masks.shape[0]
        if n == 0:
            return masks.new_zeros((0, k, *masks.shape[-2:]))
        cats = [int(c) for c in category_ids]
        with torch.no_grad():
            z = self.autoencoder.encode(masks.detach().float()).double()
        out = masks.new_zeros((n, k, *masks.shape[-2:]))
        for cat in set(cats):
            rows = [i for i, c in enumerate(cats) if c == cat]
            cents = torch.tensor(self.centroids(cat))
            if k > len(cents):
                raise CodebookError(f"k={k} exceeds codebook size {len(cents)} for category {cat}")
            d = torch.cdist(z[rows], cents)
            # stable sort keeps lower centroid index first on ties
            idx = torch.sort(d, dim=1, stable=True).indices[:, :k]
            out[rows] = self._decoded_t[cat][idx].to(masks.dtype)
        return out

    def similarity(self, pred: MaskLike, category_id: int, norm: str = "l1") -> float:
        """1 - normalized distance between a mask and its nearest decoded prior."""
        grid = as_grid(pred)
        prior = self.search(grid, category_id, 1).masks[0]
        return shape_distance_similarity(grid, prior, norm)

    def similarity_batch(self, preds: torch.Tensor, category_ids, norm: str = "l1") -> np.ndarray:
        priors = self.search_batch(preds, category_ids, 1)[:, 0]
        return np.array([shape_distance_similarity(p.double().numpy(), q.double().numpy(), norm)
                         for p, q in zip(preds, priors)])

    def state(self) -> dict:
        arrays = {f"centroids/{c}": self._centroids[c] for c in self.categories}
        arrays.update({f"ae/{k}": v.detach().cpu().numpy() for k, v in self.autoencoder.state_dict().items()})
        return arrays

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = dict(self.metadata, version=CODEBOOK_VERSION, dim=self.dim,
                    ae_dim=getattr(self.autoencoder, "dim", self.dim),
                    ae_size=getattr(self.autoencoder, "size", MASK_SIZE))
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **self.state())
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ShapeCodebook":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != CODEBOOK_VERSION:
                raise CodebookError(f"unsupported codebook version {meta.get('version')}")
            ae = MaskAutoencoder(dim=meta["ae_dim"], size=meta["ae_size"])
            ae.load_state_dict({k[3:]: torch.from_numpy(data[k]) for k in data.files if k.startswith("ae/")})
            ae.eval()
            cents = {int(k.split("/")[1]): data[k] for k in data.files if k.startswith("centroids/")}
        return cls(ae, cents, meta)


def shape_distance_similarity(pred: np.ndarray, prior: np.ndarray, norm: str = "l1") -> float:
    if pred.shape != prior.shape:
        raise ShapeMismatchError(f"{pred.shape} vs {prior.shape}")
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(prior, dtype=np.float64)
    n = diff.size
    if norm == "l1":
        dist = np.abs(diff).sum() / n
    elif norm == "l2":
        dist = np.sqrt((diff ** 2).sum() / n)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return float(min(1.0, max(0.0, 1.0 - dist)))


def build_codebook(autoencoder, masks_by_category: dict[int, np.ndarray], k: int = 64, seed: int = 0,
                   max_iter: int = 100) -> ShapeCodebook:
    """K-Means (k-means++ seeded Lloyd) over each category's mask embeddings."""
    centroids, meta = {}, {"seed": seed, "k": k, "max_iter": max_iter, "categories": {}}
    for cat in sorted(masks_by_category):
        masks = np.asarray(masks_by_category[cat], dtype=np.float32)
        if len(masks) == 0:
            raise CodebookError(f"category {cat} has no masks")
        with torch.no_grad():
            z = autoencoder.encode(torch.from_numpy(masks)).double().numpy()
        k_cat = min(k, len(z))
        res = kmeans(z, k_cat, seed=seed + cat, max_iter=max_iter)
        centroids[cat] = res.centers
        meta["categories"][str(cat)] = {"k": k_cat, "n_masks": len(z), "n_iter": res.n_iter,
                                        "converged": res.converged, "objective": res.objective}
        if k_cat < k:
            logger.info("category %d: k lowered to %d (only %d masks)", cat, k_cat, len(z))
    return ShapeCodebook(autoencoder, centroids, meta)


# ---------------------------------------------------------------- visualization


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Centered projection onto the top two principal axes, with a fixed sign convention."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    if len(x) == 1:
        return np.zeros((1, 2))
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:2]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros_like(axes)])
    for i in range(2):
        j = np.argmax(np.abs(axes[i]))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    return xc @ axes.T


def project_codebook(codebook: ShapeCodebook, category_id: int, out_dir: str | Path | None = None,
                     n_thumbnails: int = 16):
    """2-D PCA of a category's centroids; optionally writes <out>/codebook_<cat>.png and .csv."""
    pts = pca_2d(codebook.centroids(category_id))
    if out_dir is None:
        return pts, None
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.offsetbox import AnnotationBbox, OffsetImage

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"codebook_{category_id}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y"])
        for i, (x, y) in enumerate(pts):
            w.writerow([i, f"{x:.10g}", f"{y:.10g}"])
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    ax.scatter(pts[:, 0], pts[:, 1], s=8, c="tab:blue")
    decoded = codebook.decoded(category_id)
    step = max(1, len(pts) // n_thumbnails)
    for i in range(0, len(pts), step):
        ab = AnnotationBbox(OffsetImage(decoded[i], zoom=0.8, cmap="gray"), pts[i], frameon=False)
        ax.add_artist(ab)
    ax.set_title(f"category {category_id}: {len(pts)} shape priors")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    png_path = out_dir / f"codebook_{category_id}.png"
    fig.savefig(png_path, metadata={"Software": None})
    plt.close(fig)
    return pts, png_path
