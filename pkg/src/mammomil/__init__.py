"""Two-stage mammogram classification: a softmap localizer proposes mass boxes,
and an attention-based multiple instance classifier labels the image from
patches taken around those boxes."""

from .data import BoundingBox, DatasetManifest, MammogramSample, PatchBag, SoftMap, load_manifest
from .experiment import DESK, FULL, ExperimentConfig, run_fold
from .locnet import LocLossConfig, LocNet, LocNetConfig, composite_loss, locnet_forward
from .metrics import match_boxes, precision_recall, roc_auc
from .mil import MILNet, PatchEncoderConfig, classify_bag
from .phantom import PhantomConfig, generate_dataset, generate_phantom
from .postprocess import PostprocessConfig, detect
from .preprocess import AugmentationConfig, augment, preprocess_sample
from .training import Stage1Schedule, Stage2Schedule, split_folds, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig",
    "BoundingBox",
    "DESK",
    "DatasetManifest",
    "ExperimentConfig",
    "LocLossConfig",
    "LocNet",
    "LocNetConfig",
    "MILNet",
    "MammogramSample",
    "FULL",
    "PatchBag",
    "PatchEncoderConfig",
    "PhantomConfig",
    "PostprocessConfig",
    "SoftMap",
    "Stage1Schedule",
    "Stage2Schedule",
    "augment",
    "classify_bag",
    "composite_loss",
    "detect",
    "generate_dataset",
    "generate_phantom",
    "load_manifest",
    "locnet_forward",
    "match_boxes",
    "precision_recall",
    "preprocess_sample",
    "roc_auc",
    "run_fold",
    "split_folds",
    "train_stage1",
    "train_stage2",
]
