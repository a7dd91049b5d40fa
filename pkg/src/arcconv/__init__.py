"""Adaptive rotated convolution: a numpy reference implementation with checks and a toy trainer."""

from .archive import ArchiveFormatError, RunConfig, load_archive, save_archive
from .datagen import DatasetConfig, SplitMix64
from .layer import ArcLayer, ArcLayerConfig, arc_forward, arc_forward_naive
from .model import SmallNet, TrainConfig, build_smallnet, resnet50_descriptor, smallnet_descriptor, train
from .rotation import rotate_kernels, rotate_plane, sampling_matrix
from .routing import routing_forward, routing_init
from .tensor import ConfigurationError, ContractError, DimensionError, Parameter, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ArchiveFormatError", "RunConfig", "load_archive", "save_archive",
    "DatasetConfig", "SplitMix64",
    "ArcLayer", "ArcLayerConfig", "arc_forward", "arc_forward_naive",
    "SmallNet", "TrainConfig", "build_smallnet", "resnet50_descriptor", "smallnet_descriptor", "train",
    "rotate_kernels", "rotate_plane", "sampling_matrix",
    "routing_forward", "routing_init",
    "ConfigurationError", "ContractError", "DimensionError", "Parameter", "Tensor", "no_grad",
]
