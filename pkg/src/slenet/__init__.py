"""Guided segmentation network for underwater camouflaged object detection."""
from slenet.backbone import BackboneSpec, FeaturePyramid
from slenet.decode import PredictionSet
from slenet.model import ModelConfig, SLENet
from slenet.objective import LossConfig, omega_m, total_loss

__all__ = [
    "BackboneSpec",
    "FeaturePyramid",
    "LossConfig",
    "ModelConfig",
    "PredictionSet",
    "SLENet",
    "omega_m",
    "total_loss",
]
