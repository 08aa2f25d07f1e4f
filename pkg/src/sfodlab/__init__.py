"""Desk-scale lab for stabilized mean-teacher adaptation of a toy detector."""

__version__ = "0.1.0"

from .config import RunConfig, load_config, save_config
from .detector import (
    DetectorConfig,
    DetectorParams,
    ForwardOutput,
    forward,
    init_detector,
    load_checkpoint,
    loss_and_grad,
    replace_partition,
    save_checkpoint,
    snapshot,
)
from .geometry import BoxCXCYWH, giou, iou, l1_box
from .labels import PseudoLabelSet, SceneAnnotation
from .scenes import DomainShiftSpec, ImageSet, LabeledDataset, build_dataset
from .training import MethodSpec, adapt, make_datasets, parse_method, pretrain_source

__all__ = [
    "BoxCXCYWH",
    "DetectorConfig",
    "DetectorParams",
    "DomainShiftSpec",
    "ForwardOutput",
    "ImageSet",
    "LabeledDataset",
    "MethodSpec",
    "PseudoLabelSet",
    "RunConfig",
    "SceneAnnotation",
    "adapt",
    "build_dataset",
    "forward",
    "giou",
    "init_detector",
    "iou",
    "l1_box",
    "load_checkpoint",
    "load_config",
    "loss_and_grad",
    "make_datasets",
    "parse_method",
    "pretrain_source",
    "replace_partition",
    "save_checkpoint",
    "save_config",
    "snapshot",
]
