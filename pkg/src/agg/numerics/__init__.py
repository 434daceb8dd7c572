"""Dense tensors with reverse-mode differentiation, ADAM and gradient checks."""

from agg.numerics import ops
from agg.numerics.gradcheck import finite_diff_check
from agg.numerics.optim import AdamState, adam_step, clip_global_norm, global_norm
from agg.numerics.rng import make_rng
from agg.numerics.tensor import Parameter, ParameterStore, Tape, Tensor, backward

__all__ = [
    "AdamState", "Parameter", "ParameterStore", "Tape", "Tensor", "adam_step", "backward",
    "clip_global_norm", "finite_diff_check", "global_norm", "make_rng", "ops",
]
