"""Lung and COVID-19 lesion segmentation and CT severity scoring with a cascade of 3D U-nets."""

from .cascade import SeverityReport, UNetSegmenter, ct_severity_score, quantify, run_pipeline
from .errors import (
    EmptyMaskError,
    GeometryError,
    LungQuantError,
    StageError,
    UnsupportedBitDepthError,
    VolumeFormatError,
)
from .losses import combined_loss, compute_class_weights, dice_loss, dice_metric, weighted_cross_entropy
from .model import UNet, UNetConfig, build_unet, load_checkpoint, save_checkpoint
from .phantom import generate_phantom
from .preprocess import LESION_WINDOW, LUNG_WINDOW, HuWindow, resample, window_and_normalize
from .refine import bounding_box, refine_lung_mask
from .volume_io import BinaryMask3D, CtVolume, load_mask, load_volume, save_mask, save_volume

__version__ = "0.1.0"

__all__ = [
    "BinaryMask3D",
    "CtVolume",
    "EmptyMaskError",
    "GeometryError",
    "HuWindow",
    "LESION_WINDOW",
    "LUNG_WINDOW",
    "LungQuantError",
    "SeverityReport",
    "StageError",
    "UNet",
    "UNetConfig",
    "UNetSegmenter",
    "UnsupportedBitDepthError",
    "VolumeFormatError",
    "bounding_box",
    "build_unet",
    "combined_loss",
    "compute_class_weights",
    "ct_severity_score",
    "dice_loss",
    "dice_metric",
    "generate_phantom",
    "load_checkpoint",
    "load_mask",
    "load_volume",
    "quantify",
    "refine_lung_mask",
    "resample",
    "run_pipeline",
    "save_checkpoint",
    "save_mask",
    "save_volume",
    "weighted_cross_entropy",
    "window_and_normalize",
]
