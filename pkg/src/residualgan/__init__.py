"""Residual dual GAN domain adaptation for aerial image segmentation.

Stage A trains two ResiGenerators (residual backbone plus in-network
resizer) with WGAN-GP critics and a cycle loss. Stage B trains a
segmenter on translated source tiles with output-space adaptation.
"""

__version__ = "0.1.0"

from .checkpoint import CheckpointError
from .datakit import (
    ISPRS_PALETTE,
    ClassPalette,
    DomainSpec,
    ScaleReport,
    SyntheticDomainConfig,
    SyntheticSceneConfig,
    TileManifest,
    TileRecord,
    ValidationError,
    check_scale_compat,
    decode_labels,
    encode_labels,
    generate_synthetic_pair,
    resize_labels_nearest,
    tile_raster,
)
from .losses import StageAWeights, StageBWeights
from .metrics import ConfusionMatrix, MetricsReport, compute_report, confusion, format_report
from .nets import ResiGenerator, ResiGeneratorConfig, build_resi_generator
from .train_a import StageAConfig, TrainingDiverged, train_stage_a, translate_dataset
from .train_b import StageBConfig, evaluate, predict, train_stage_b

__all__ = [
    "__version__",
    "CheckpointError",
    "ISPRS_PALETTE",
    "ClassPalette",
    "DomainSpec",
    "ScaleReport",
    "SyntheticDomainConfig",
    "SyntheticSceneConfig",
    "TileManifest",
    "TileRecord",
    "ValidationError",
    "check_scale_compat",
    "decode_labels",
    "encode_labels",
    "generate_synthetic_pair",
    "resize_labels_nearest",
    "tile_raster",
    "StageAWeights",
    "StageBWeights",
    "ConfusionMatrix",
    "MetricsReport",
    "compute_report",
    "confusion",
    "format_report",
    "ResiGenerator",
    "ResiGeneratorConfig",
    "build_resi_generator",
    "StageAConfig",
    "TrainingDiverged",
    "train_stage_a",
    "translate_dataset",
    "StageBConfig",
    "evaluate",
    "predict",
    "train_stage_b",
]
