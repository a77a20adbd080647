"""The full model: backbone, coarse heads and the refinement wiring."""

from __future__ import annotations

import enum
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .amodal import refine_amodal
from .backbone import Backbone, BackboneConfig, BoxHead, HeadOutputs, MaskHead, coarse_forward
from .visible import ReclassHead, reclassify, refine_visible

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class AblationVariant(str, enum.Enum):
    """Which coarse mask gates which refinement pass."""

    BOTH_SELF = "both-self"        # M_a^r = f_a(F*M_a^c), M_v^r = f_v(F*M_v^c)
    ONLY_VISIBLE = "only-visible"  # M_v^r = f_v(F*M_v^c), M_a^r = f_a(F*M_v^r)
    CROSS = "cross"                # M_a^r = f_a(F*M_v^c), M_v^r = f_v(F*M_a^c)
    OURS = "ours"                  # M_v^r = f_v(F*M_a^c), M_a^r = f_a(F*M_v^r)


@dataclass(frozen=True)
class PipelineOptions:
    variant: AblationVariant = AblationVariant.OURS
    visible_attention: bool = True   # gate the amodal refinement with a visible mask
    shape_prior_refine: bool = True  # append retrieved priors to the amodal input (OURS only)
    reclass: bool = True             # reclassification branch + score fusion
    rescoring: bool = True           # shape-prior score post-process at inference

    def __post_init__(self):
        object.__setattr__(self, "variant", AblationVariant(self.variant))

    @property
    def uses_priors(self) -> bool:
        return self.shape_prior_refine and self.variant is AblationVariant.OURS


@dataclass(frozen=True)
class ModelConfig:
    n_categories: int = 3
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head_width: int = 32
    n_priors: int = 16
    box_hidden: int = 256
    reclass_hidden: int = 256

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = d.pop("backbone", {})
        if "widths" in bb:
            bb["widths"] = tuple(bb["widths"])
        return cls(backbone=BackboneConfig(**bb), **d)


@dataclass
class RefineOutputs:
    coarse: HeadOutputs
    visible_logits: torch.Tensor
    amodal_logits: torch.Tensor
    visible_attention: torch.Tensor
    amodal_attention: torch.Tensor | None
    priors: torch.Tensor | None
    reclass_logits: torch.Tensor | None
    visible_acts: list = field(default_factory=list, repr=False)
    amodal_acts: list = field(default_factory=list, repr=False)

    @property
    def refined_visible(self) -> torch.Tensor:
        return torch.sigmoid(self.visible_logits)

    @property
    def refined_amodal(self) -> torch.Tensor:
        return torch.sigmoid(self.amodal_logits)


class AmodalModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.backbone.roi_channels
        self.backbone = Backbone(cfg.backbone)
        self.box_head = BoxHead(c, cfg.n_categories, cfg.box_hidden, cfg.backbone.roi_size)
        self.visible_head = MaskHead(c, cfg.head_width)
        self.amodal_head = MaskHead(c + cfg.n_priors, cfg.head_width)
        self.reclass_head = ReclassHead(c, cfg.n_categories, cfg.backbone.roi_size, cfg.reclass_hidden)

    def coarse(self, feats: torch.Tensor) -> HeadOutputs:
        return coarse_forward(self.box_head, self.amodal_head, self.visible_head, feats)

    def forward_rois(self, feats: torch.Tensor, prior_categories, options: PipelineOptions,
                     codebook=None, coarse: HeadOutputs | None = None) -> RefineOutputs:
        """Coarse pass plus the variant-specific refinement for a stack of ROI features.

        ``prior_categories`` are 1-based category ids used for shape-prior
        retrieval (ground truth while training, predictions at inference).
        """
        out = coarse if coarse is not None else self.coarse(feats)
        m_ac, m_vc = out.coarse_amodal.detach(), out.coarse_visible.detach()
        v = options.variant
        att_v = m_vc if v in (AblationVariant.BOTH_SELF, AblationVariant.ONLY_VISIBLE) else m_ac
        v_logits, v_acts = refine_visible(self.visible_head, feats, att_v, return_activations=True)
        m_vr = torch.sigmoid(v_logits).detach()
        if v is AblationVariant.BOTH_SELF:
            att_a = m_ac
        elif v is AblationVariant.CROSS:
            att_a = m_vc
        else:
            att_a = m_vr if options.visible_attention else None
        priors = None
        if options.uses_priors:
            if codebook is None:
                raise ValueError("shape-prior refinement needs a codebook")
            priors = codebook.search_batch(m_ac, prior_categories, self.cfg.n_priors)
        a_logits, a_acts = refine_amodal(self.amodal_head, feats, att_a, priors, return_activations=True)
        rc = reclassify(self.reclass_head, feats, m_vr) if options.reclass else None
        return RefineOutputs(out, v_logits, a_logits, att_v, att_a, priors, rc, v_acts, a_acts)

    # ---- checkpoints

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"version": CHECKPOINT_VERSION, "config": self.cfg.to_dict(), "extra": extra or {}}
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True, default=str)), **arrays)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> tuple["AmodalModel", dict]:
        with np.load(path, allow_pickle=False) as data:
            if "__meta__" not in data.files:
                raise CheckpointError(f"{path} has no metadata record")
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
            model = cls(ModelConfig.from_dict(meta["config"]))
            state = {k: torch.from_numpy(data[k]) for k in data.files if k != "__meta__"}
        model.load_state_dict(state)
        model.eval()
        return model, meta.get("extra", {})
