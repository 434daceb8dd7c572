"""Attention-based imputation and prediction for asynchronous multichannel time series.

Observations are treated as graph nodes (measurement, timestamp, channel
features). Missing or future values are generated by conditional attention
over a block of observed nodes.
"""

from agg.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from agg.errors import (AGGError, CheckpointError, ConfigurationError, DataError,
                        InvalidMaskError, PipelineOrderingError, TrainingDivergenceError)
from agg.model import AGG, ModelConfig, count_parameters, parameter_breakdown
from agg.pipeline import Dataset, PipelineConfig, Schema, load_csv, prepare, write_csv
from agg.training import TrainConfig, fit, train

__version__ = "0.1.0"

__all__ = [
    "AGG", "AGGError", "Checkpoint", "CheckpointError", "ConfigurationError", "DataError",
    "Dataset", "InvalidMaskError", "ModelConfig", "PipelineConfig", "PipelineOrderingError",
    "Schema", "TrainConfig", "TrainingDivergenceError", "count_parameters", "fit",
    "load_checkpoint", "load_csv", "parameter_breakdown", "prepare", "save_checkpoint", "train",
    "write_csv",
]
