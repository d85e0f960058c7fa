"""Online lifting of per-frame 2D instance masks into 3D instances over a hashed TSDF volume."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .mask_bank import DeadMaskError, MappingTable, MaskBank, MaskRecord
from .merge import MergeConfig, MergeStats, merge_step
from .pipeline import OnlineSegmenter, PipelineConfig, SegmentationResult, run
from .volume import CameraIntrinsics, Frame, VoxelVolume

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "CameraIntrinsics",
    "DeadMaskError",
    "Frame",
    "MappingTable",
    "MaskBank",
    "MaskRecord",
    "MergeConfig",
    "MergeStats",
    "OnlineSegmenter",
    "PipelineConfig",
    "SegmentationResult",
    "VoxelVolume",
    "merge_step",
    "run",
]
