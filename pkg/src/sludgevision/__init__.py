"""Predict activated-sludge settleability (SVI) from microscopy images."""

from .augment import AugmentPolicy, apply_policy
from .data_ingest import (
    DatasetManifest,
    ImageDataset,
    ImageSample,
    NormalizationStats,
    SettlingRecord,
    compute_svi,
    group_by_day,
    load_image,
    load_manifest,
    normalize,
)
from .errors import SludgeVisionError, TrainingError, ValidationError
from .evalcv import EvalBatch, MetricsReport, compare_models, cross_validate, kfold_split
from .model_zoo import ModelSpec, build_model, complexity_report
from .monitor import aggregate_daily, detect_warnings, emit_report
from .trainer import TrainConfig, lr_at, train

__version__ = "0.1.0"
