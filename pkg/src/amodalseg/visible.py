"""Visible-mask refinement: amodal attention, reclassification and feature matching."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import MaskHead, _weighted_mean
from .types import RoiFeature


@dataclass(frozen=True)
class FeatureMatchConfig:
    """Per-layer feature matching weights (layers 1..5) and the reclass weight."""

    layer_weights: tuple[float, ...] = (0.0, 0.0, 0.0, 0.01, 0.05)
    reclass_weight: float = 0.25

    def __post_init__(self):
        if any(w < 0 for w in self.layer_weights) or self.reclass_weight < 0:
            raise ValueError("feature matching weights must be non-negative")


def apply_mask_attention(feats, mask: torch.Tensor):
    """Multiply every channel by the mask, bilinearly resized to the feature grid.

    Accepts an N x C x h x w tensor with N x H x W masks, or a single
    RoiFeature with an H x W mask.
    """
    if isinstance(feats, RoiFeature):
        out = apply_mask_attention(feats.data[None], torch.as_tensor(mask, dtype=feats.data.dtype)[None])
        return RoiFeature(out[0], feats.source_box)
    h, w = feats.shape[-2:]
    mask = mask.to(feats.dtype)
    if mask.shape[-2:] != (h, w):
        mask = F.interpolate(mask[:, None], size=(h, w), mode="bilinear", align_corners=False)[:, 0]
    return feats * mask[:, None]


def refine_visible(visible_head: MaskHead, feats: torch.Tensor, attention: torch.Tensor,
                   return_activations: bool = False):
    """Refined visible logits: the same visible head applied to attention-masked features."""
    return visible_head(apply_mask_attention(feats, attention.detach()), return_activations)


class ReclassHead(nn.Module):
    """Two fully connected layers over flattened masked ROI features -> category logits."""

    def __init__(self, in_channels: int, n_categories: int, roi_size: int = 14, hidden: int = 256):
        super().__init__()
        self.in_features = in_channels * roi_size * roi_size
        self.fc1 = nn.Linear(self.in_features, hidden)
        self.fc2 = nn.Linear(hidden, n_categories)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x.flatten(1))))


def reclassify(reclass_head: ReclassHead, feats: torch.Tensor, refined_visible: torch.Tensor) -> torch.Tensor:
    return reclass_head(apply_mask_attention(feats, refined_visible.detach()))


def reclass_loss(logits: torch.Tensor, labels: torch.Tensor, weight: float = 0.25,
                 instance_weights: torch.Tensor | None = None) -> torch.Tensor:
    """weight/N * sum_i w_i CE(logits_i, y_i); labels are 0-based category indices."""
    if weight == 0.0:
        return logits.sum() * 0.0
    ce = F.cross_entropy(logits, labels, reduction="none")
    return weight * _weighted_mean(ce, instance_weights)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-instance 1 - cos(vec(a_i), vec(b_i)); 0 where either vector has zero norm."""
    a, b = a.flatten(1), b.flatten(1)
    ok = (a != 0).any(dim=1) & (b != 0).any(dim=1)
    # swap guarded rows for ones before the norm: its backward is NaN at the zero vector
    a = torch.where(ok[:, None], a, torch.ones_like(a))
    b = torch.where(ok[:, None], b, torch.ones_like(b))
    cos = (a * b).sum(dim=1) / (a.norm(dim=1) * b.norm(dim=1))
    return torch.where(ok, 1.0 - cos, torch.zeros_like(cos))


def feature_matching_loss(acts_ref: list[torch.Tensor], acts_att: list[torch.Tensor],
                          layer_weights, instance_weights: torch.Tensor | None = None) -> torch.Tensor:
    """(1/(N*S)) sum_{i,j} lambda_j w_i (1 - cos(ref_ij, att_ij))."""
    if len(acts_ref) != len(acts_att) or len(acts_ref) != len(layer_weights):
        raise ValueError("activation lists and layer weights must have the same length")
    n_layers = len(acts_ref)
    n = acts_ref[0].shape[0]
    total = acts_ref[0].new_zeros(())
    if n == 0:
        return total
    for lam, ra, aa in zip(layer_weights, acts_ref, acts_att):
        if lam == 0.0:
            continue
        d = cosine_distance(ra, aa)
        if instance_weights is not None:
            d = d * instance_weights
        total = total + lam * d.sum()
    return total / (n * n_layers)


def visible_feature_matching(visible_head: MaskHead, feats: torch.Tensor, attention: torch.Tensor,
                             layer_weights, instance_weights: torch.Tensor | None = None,
                             acts_ref: list | None = None, acts_att: list | None = None) -> torch.Tensor:
    """Feature matching between f_v(F) and f_v(F * attention); reuses activations when given."""
    if acts_ref is None:
        _, acts_ref = visible_head(feats, return_activations=True)
    if acts_att is None:
        _, acts_att = refine_visible(visible_head, feats, attention, return_activations=True)
    return feature_matching_loss(acts_ref, acts_att, layer_weights, instance_weights)
