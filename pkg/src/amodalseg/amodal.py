"""Amodal refinement from visible-region features and retrieved shape priors."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .backbone import MaskHead, _weighted_mean, mask_bce, pad_prior_channels
from .visible import apply_mask_attention, feature_matching_loss


def amodal_input(feats: torch.Tensor, attention: torch.Tensor | None, priors: torch.Tensor | None,
                 n_priors: int) -> torch.Tensor:
    """cat(F * attention, priors resized to the feature grid).

    ``attention=None`` leaves F unmasked; ``priors=None`` fills the prior
    channels with zeros (the coarse-pass layout).
    """
    x = feats if attention is None else apply_mask_attention(feats, attention.detach())
    if priors is None:
        return pad_prior_channels(x, n_priors)
    if priors.shape[1] != n_priors:
        raise ValueError(f"expected {n_priors} prior masks per instance, got {priors.shape[1]}")
    h, w = feats.shape[-2:]
    p = priors.detach().to(feats.dtype)
    if p.shape[-2:] != (h, w):
        p = F.interpolate(p, size=(h, w), mode="bilinear", align_corners=False)
    return torch.cat([x, p], dim=1)


def refine_amodal(amodal_head: MaskHead, feats: torch.Tensor, refined_visible: torch.Tensor | None,
                  priors: torch.Tensor | None, return_activations: bool = False):
    n_priors = amodal_head.in_channels - feats.shape[1]
    return amodal_head(amodal_input(feats, refined_visible, priors, n_priors), return_activations)


def amodal_feature_matching(amodal_head: MaskHead, feats: torch.Tensor, refined_visible: torch.Tensor,
                            layer_weights, instance_weights: torch.Tensor | None = None,
                            acts_ref: list | None = None) -> torch.Tensor:
    """Feature matching between f_a(F) and f_a(F * M_v^r), both in the zero-padded layout."""
    n_priors = amodal_head.in_channels - feats.shape[1]
    if acts_ref is None:
        _, acts_ref = amodal_head(pad_prior_channels(feats, n_priors), return_activations=True)
    _, acts_att = amodal_head(amodal_input(feats, refined_visible, None, n_priors), return_activations=True)
    return feature_matching_loss(acts_ref, acts_att, layer_weights, instance_weights)


def mask_ce2(logits: torch.Tensor, target: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Two-class cross-entropy per pixel with logits (0, z); numerically the same as BCE on z."""
    two = torch.stack([torch.zeros_like(logits), logits], dim=1)
    per_pixel = F.cross_entropy(two, (target >= 0.5).long(), reduction="none")
    return _weighted_mean(per_pixel.flatten(1).mean(dim=1), weights)


AMODAL_MASK_LOSSES = {"bce": mask_bce, "ce2": mask_ce2}
