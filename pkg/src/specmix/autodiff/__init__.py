"""Reverse-mode automatic differentiation on numpy arrays."""
from specmix.autodiff.tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    concat,
    no_record,
    recording,
    stop_gradient,
)
from specmix.autodiff import functional, tensor

__all__ = [
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "concat",
    "functional",
    "no_record",
    "recording",
    "stop_gradient",
    "tensor",
]
