"""Nested U-net segmentation toolkit.

Architecture builders, dataset ingestion, cross-validation training,
segmentation metrics, significance testing, and a CLI tying them into
reproducible experiments.
"""

from .arch import (
    BackboneConfig,
    ChannelSchedule,
    MDSCConfig,
    MOUConfig,
    NUNetConfig,
    build_backbone,
    build_mou,
    build_nunet,
    build_variant,
    mou_depth_schedule,
)
from .complexity import count_flops, count_params
from .errors import ConfigError, DataError, NUNetError, ShapeError, TrainingError

__all__ = [
    "BackboneConfig",
    "ChannelSchedule",
    "ConfigError",
    "DataError",
    "MDSCConfig",
    "MOUConfig",
    "NUNetConfig",
    "NUNetError",
    "ShapeError",
    "TrainingError",
    "build_backbone",
    "build_mou",
    "build_nunet",
    "build_variant",
    "count_flops",
    "count_params",
    "mou_depth_schedule",
]

__version__ = "0.1.0"
