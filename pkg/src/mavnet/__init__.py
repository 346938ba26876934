"""Numpy training and inference engine for the MAVNet segmentation network."""

from mavnet.model import Model, ModelConfig, build
from mavnet.ops import ConvSpec, conv2d, receptive_field
from mavnet.losses import FocalLossConfig, focal_loss
from mavnet.metrics import MetricsReport, evaluate_masks
from mavnet.train import RunConfig, evaluate, predict, train
from mavnet.checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConvSpec", "FocalLossConfig", "MetricsReport", "Model", "ModelConfig", "RunConfig",
    "build", "conv2d", "evaluate", "evaluate_masks", "focal_loss", "load_checkpoint",
    "predict", "receptive_field", "save_checkpoint", "train",
]
