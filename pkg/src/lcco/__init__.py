"""CLIP-guided image co-segmentation."""
from .records import (ClipBundle, CosegError, DataError, ImageSet, MaskBatch, NumericalError,
                      TrainConfig, validate_image_set, MASK_THRESHOLD)
from .backbone import BackboneSpec, FeaturePyramid, MaskHead, build_backbone
from .clip_provider import FixtureClip, FixtureStore, PromptBank, similarity
from .model import CoSegNet, ModelConfig
from .config import ExperimentConfig

__all__ = [
    "BackboneSpec", "ClipBundle", "CoSegNet", "CosegError", "DataError", "ExperimentConfig",
    "FeaturePyramid", "FixtureClip", "FixtureStore", "ImageSet", "MASK_THRESHOLD", "MaskBatch",
    "MaskHead", "ModelConfig", "NumericalError", "PromptBank", "TrainConfig", "build_backbone",
    "similarity", "validate_image_set",
]
__version__ = "0.1.0"
