"""Anatomy-aware myocardium motion tracking on synthetic cine MRI."""

from .cine import CineSequence, read_cine, write_cine
from .estimator import AnatomyPrior, DivergenceError, EstimatorConfig, MotionPair, estimate_pair
from .flow import FlowField, compose, warp
from .io import FormatError
from .losses import LossWeights
from .metrics import MetricReport, assd, dice, evaluate_masks, hausdorff, wilcoxon_signed_rank
from .shape_prior import VaeConfig, VaeDivergenceError, load_vae, save_vae, train_vae, vae_correct
from .synth import PhantomConfig, generate_mask_family, generate_phantom
from .tensor import GraphConsumedError, NonFiniteError, Tensor, gradient_check
from .tracker import TrackingResult, evaluate_tracking, track_sequence

__version__ = "0.1.0"

__all__ = [
    "AnatomyPrior", "CineSequence", "DivergenceError", "EstimatorConfig", "FlowField", "FormatError",
    "GraphConsumedError", "LossWeights", "MetricReport", "MotionPair", "NonFiniteError", "PhantomConfig",
    "Tensor", "TrackingResult", "VaeConfig", "VaeDivergenceError", "assd", "compose", "dice", "estimate_pair",
    "evaluate_masks", "evaluate_tracking", "generate_mask_family", "generate_phantom", "gradient_check",
    "hausdorff", "load_vae", "read_cine", "save_vae", "track_sequence", "train_vae", "vae_correct", "warp",
    "wilcoxon_signed_rank", "write_cine",
]
