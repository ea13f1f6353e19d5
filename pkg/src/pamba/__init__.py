"""Serialized point-cloud segmentation with sparse convolutions and bidirectional selective scans."""
from .cloud import PointCloud, locality_stats, quantize, read_cloud, serialize, write_cloud
from .curve3d import CurvePattern, decode, encode
from .errors import DomainError, NumericError, ResolutionError
from .network import (ConvMambaBlock, ModelConfig, SegmentationNet, erf_probe, load_checkpoint,
                      model_forward, save_checkpoint)
from .objective import LossConfig, miou, total_loss
from .synthdata import SceneSpec, generate

__version__ = "0.1.0"
