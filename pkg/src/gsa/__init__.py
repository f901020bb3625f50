"""Neck group lasso, head channel-scale pruning and adaptive distillation for a miniature detector."""

from .config import PipelineConfig, desk_config
from .errors import ArgumentError, ConfigError, DataError, DimensionError, GSAError, NumericError
from .model import build_student, build_teacher, forward, read_checkpoint, write_checkpoint
from .pipeline import run_ablation, run_baseline, run_pipeline, train_teacher

__version__ = "0.1.0"
