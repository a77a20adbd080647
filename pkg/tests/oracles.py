"""Independent reference implementations used as test oracles.

Written with plain loops and no shared code with the package, so that an
agreement between the two routes means something.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------- bilinear


def bilinear_1d_weights(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix (n_out x n_in) for half-pixel-centred bilinear resampling."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        w[i, lo] += 1 - frac
        w[i, hi] += frac
    return w


def bilinear_resize(grid: np.ndarray, shape) -> np.ndarray:
    return bilinear_1d_weights(grid.shape[0], shape[0]) @ grid @ bilinear_1d_weights(grid.shape[1], shape[1]).T


# ---------------------------------------------------------------- K-Means


def brute_lloyd(points, init, max_iter: int = 100):
    """Lloyd's algorithm on python lists; returns (centers, labels, objective)."""
    pts = [tuple(map(float, p)) for p in points]
    centers = [list(map(float, c)) for c in init]

    def nearest(p):
        best, best_d = 0, None
        for j, c in enumerate(centers):
            d = sum((a - b) ** 2 for a, b in zip(p, c))
            if best_d is None or d < best_d:
                best, best_d = j, d
        return best, best_d

    labels = [nearest(p)[0] for p in pts]
    for _ in range(max_iter):
        for j in range(len(centers)):
            members = [p for p, lab in zip(pts, labels) if lab == j]
            if members:
                centers[j] = [sum(col) / len(members) for col in zip(*members)]
        new = [nearest(p)[0] for p in pts]
        if new == labels:
            break
        labels = new
    objective = sum(nearest(p)[1] for p in pts)
    return np.array(centers), np.array(labels), objective


# ---------------------------------------------------------------- AP


def brute_ap(det_scores, det_image, ious, gt_image, thresholds, recall_points=101):
    """COCO-style AP for one category by direct enumeration.

    ``ious[d][g]`` holds the IoU between detection d and ground truth g
    (zero across images). Detections are visited in descending score order
    (ties by input index); each takes the best still-free GT of its image
    whose IoU reaches the threshold. Returns (mean AP, per-threshold AP,
    per-threshold recall).
    """
    n_gt = len(gt_image)
    order = sorted(range(len(det_scores)), key=lambda d: (-det_scores[d], d))
    aps, recalls = [], []
    for t in thresholds:
        taken = set()
        flags = []
        for d in order:
            best_g, best = None, min(t, 1 - 1e-10)
            for g in range(n_gt):
                if g in taken or gt_image[g] != det_image[d]:
                    continue
                if ious[d][g] >= best:
                    best_g, best = g, ious[d][g]
            if best_g is None:
                flags.append(False)
            else:
                taken.add(best_g)
                flags.append(True)
        prec, rec = [], []
        tp = 0
        for k, f in enumerate(flags, start=1):
            tp += f
            prec.append(tp / k)
            rec.append(tp / n_gt)
        # precision envelope: best precision at any recall to the right
        env = [max(prec[k:]) for k in range(len(prec))]
        total = 0.0
        for r in np.linspace(0, 1, recall_points):
            hit = [env[k] for k in range(len(rec)) if rec[k] >= r]
            total += hit[0] if hit else 0.0
        aps.append(total / recall_points)
        recalls.append(rec[-1] if rec else 0.0)
    return float(np.mean(aps)), aps, recalls


# ---------------------------------------------------------------- NMS


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def exhaustive_nms(boxes, scores, threshold):
    """Survivor set found by checking every subset against the suppression-chain conditions.

    A subset S is the NMS result iff (a) no member overlaps a higher-ranked
    member above the threshold and (b) every non-member overlaps some
    higher-ranked member above the threshold. Exactly one subset qualifies.
    """
    n = len(boxes)
    rank = {i: r for r, i in enumerate(sorted(range(n), key=lambda i: (-scores[i], i)))}
    over = [[_box_iou(boxes[i], boxes[j]) > threshold for j in range(n)] for i in range(n)]
    found = []
    for bits in itertools.product((0, 1), repeat=n):
        s = {i for i in range(n) if bits[i]}
        ok = all(not any(over[i][j] and rank[j] < rank[i] for j in s) for i in s)
        ok = ok and all(any(over[i][j] and rank[j] < rank[i] for j in s) for i in range(n) if i not in s)
        if ok:
            found.append(s)
    assert len(found) == 1, f"expected a unique fixed point, found {found}"
    return found[0]


# ---------------------------------------------------------------- gradients


def central_difference(loss_fn, params, step: float = 1e-3):
    """Numerical gradient of a scalar loss w.r.t. a list of float64 tensors (perturbed in place)."""
    import torch

    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def relative_error(a, b) -> float:
    a = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in a])
    b = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in b])
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)
