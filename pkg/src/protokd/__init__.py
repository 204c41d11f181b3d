"""Prototype-based self-distillation for classification from one or a few examples per class."""
from .augment import AugmentPolicy, TransformSpec, default_image_policy, default_pseudo_image_policy
from .data import Dataset, SplitSpec, SyntheticSpec, generate_synthetic, scarce_split
from .encoder import Checkpoint, EncoderConfig, StudentHead, WideResNet, load_checkpoint, save_checkpoint
from .evaluation import MetricsReport, classify, per_class_metrics, run_trials
from .trainer import TrainConfig, TrainingDivergence, train

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy",
    "Checkpoint",
    "Dataset",
    "EncoderConfig",
    "MetricsReport",
    "SplitSpec",
    "StudentHead",
    "SyntheticSpec",
    "TrainConfig",
    "TrainingDivergence",
    "TransformSpec",
    "WideResNet",
    "classify",
    "default_image_policy",
    "default_pseudo_image_policy",
    "generate_synthetic",
    "load_checkpoint",
    "per_class_metrics",
    "run_trials",
    "save_checkpoint",
    "scarce_split",
    "train",
]
