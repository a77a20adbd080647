"""Amodal instance segmentation with cross-task attention and a shape-prior codebook."""

from .evaluation import EvalConfig, evaluate, invariance_probe
from .inference import infer, nms, rescore
from .model import AblationVariant, AmodalModel, ModelConfig, PipelineOptions
from .shape_prior import MaskAutoencoder, ShapeCodebook, build_codebook, train_autoencoder
from .synthetic import generate_splits, make_invariance_pairs
from .training import TrainConfig, train
from .types import BoundingBox, Detection, InstanceAnnotation, Mask

__version__ = "0.1.0"

__all__ = [
    "AblationVariant", "AmodalModel", "BoundingBox", "Detection", "EvalConfig", "InstanceAnnotation", "Mask",
    "MaskAutoencoder", "ModelConfig", "PipelineOptions", "ShapeCodebook", "TrainConfig", "build_codebook",
    "evaluate", "generate_splits", "infer", "invariance_probe", "make_invariance_pairs", "nms", "rescore",
    "train", "train_autoencoder",
]
