"""Boundary-aware point cloud segmentation toolkit.

Pieces: exact-radius neighborhoods and grid pooling hierarchies, boundary
quality metrics, sub-scene boundary mining over pooled label distributions,
a boundary contrastive loss with analytic gradients, and a small
continuous-convolution segmentation network trained with plain SGD.
"""

__version__ = "0.1.0"

from .cloud import (CloudFormatError, NeighborhoodIndex, PointCloud,
                    SamplingHierarchy, StageRecord, build_hierarchy,
                    build_index, grid_subsample, read_cloud, write_cloud)
from .loss import CblConfig, CblContributions, FeatureMatrix, cbl_backward, \
    cbl_forward, total_loss
from .metrics import (BoundarySet, MetricsReport, ReportCounts, boundary_iou,
                      extract_boundary, full_report, iou_counts, miou_on,
                      report_counts)
from .mining import (MiningConfig, mine_stage_boundaries,
                     soft_vs_hard_divergence, stage_labels_argmax,
                     symmetric_kl)
from .net import (CheckpointError, ConvLayer, NetConfig, SegNet,
                  StageGeometry, conv_forward, forward, load_checkpoint,
                  save_checkpoint, softmax_cross_entropy)
from .synth import SynthConfig, generate, generate_split
from .train import (SceneCache, TrainConfig, TrainingDiverged,
                    build_scene_cache, evaluate, predict, step_losses, train)

__all__ = [
    "__version__",
    "CloudFormatError", "NeighborhoodIndex", "PointCloud", "SamplingHierarchy",
    "StageRecord", "build_hierarchy", "build_index", "grid_subsample",
    "read_cloud", "write_cloud",
    "CblConfig", "CblContributions", "FeatureMatrix", "cbl_backward",
    "cbl_forward", "total_loss",
    "BoundarySet", "MetricsReport", "ReportCounts", "boundary_iou",
    "extract_boundary", "full_report", "iou_counts", "miou_on",
    "report_counts",
    "MiningConfig", "mine_stage_boundaries", "soft_vs_hard_divergence",
    "stage_labels_argmax", "symmetric_kl",
    "CheckpointError", "ConvLayer", "NetConfig", "SegNet", "StageGeometry",
    "conv_forward", "forward", "load_checkpoint", "save_checkpoint",
    "softmax_cross_entropy",
    "SynthConfig", "generate", "generate_split",
    "SceneCache", "TrainConfig", "TrainingDiverged", "build_scene_cache",
    "evaluate", "predict", "step_losses", "train",
]
