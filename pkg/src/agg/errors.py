"""Exception hierarchy shared by every layer of the package."""

from __future__ import annotations


class AGGError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AGGError, ValueError):
    """Invalid configuration or non-conforming tensor shapes."""


class DataError(AGGError, ValueError):
    """Malformed or out-of-vocabulary input data."""


class InvalidMaskError(AGGError, ValueError):
    """An attention row has no unmasked entry."""


class PipelineOrderingError(AGGError, ValueError):
    """An input node lies after the reference time of its block."""


class CheckpointError(AGGError, ValueError):
    """Checkpoint file is truncated, corrupt, or of an incompatible version."""


class TrainingDivergenceError(AGGError, RuntimeError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None,
                 lr: float | None = None):
        parts = [message]
        if epoch is not None:
            parts.append(f"epoch={epoch}")
        if step is not None:
            parts.append(f"step={step}")
        if lr is not None:
            parts.append(f"lr={lr:g}")
        super().__init__(" ".join(parts))
        self.epoch = epoch
        self.step = step
        self.lr = lr
