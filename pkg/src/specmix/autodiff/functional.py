"""Neural-network layers composed from the tensor primitives.

Layers take ``B x D x C`` tensors (batch, spectral position, channel).
Everything here is built from differentiable primitives, so all of it
supports double backward.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from specmix.autodiff import tensor as T
from specmix.autodiff.tensor import Tensor, as_tensor
from specmix.errors import (
    BatchError,
    ContractError,
    ParameterError,
    ShapeError,
    UnsupportedOpError,
)

LRELU_SLOPE = 0.01
PRELU_INIT = 0.25
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
SN_EPS = 1e-8
L1_EPS = 1e-12


class DegenerateInputWarning(UserWarning):
    """A normalization met an all-zero slice."""


def same_padding(d_in: int, k: int, stride: int) -> tuple[int, int]:
    """Output length and left padding of a "same" convolution."""
    length_out = -(-d_in // stride)
    total = max((length_out - 1) * stride + k - d_in, 0)
    return length_out, total // 2


def conv1d(x, kernel, bias=None, stride: int = 1) -> Tensor:
    """Cross-correlation with "same" zero padding.

    ``x`` is ``B x D x C_in``, ``kernel`` is ``k x C_in x C_out``; the output
    is ``B x ceil(D / stride) x C_out``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError("conv1d expects B x D x C input and k x C_in x C_out kernel")
    k, c_in, c_out = kernel.shape
    if x.shape[2] != c_in:
        raise ShapeError(f"conv1d channel mismatch: input has {x.shape[2]}, kernel expects {c_in}")
    if k % 2 == 0:
        raise ParameterError(f"conv1d kernel size must be odd, got {k}")
    if stride < 1:
        raise ParameterError(f"conv1d stride must be >= 1, got {stride}")
    b, d, _ = x.shape
    length_out, pad_left = same_padding(d, k, stride)
    cols = T.im2col(x, k, stride, pad_left, length_out)
    cols = cols.reshape(b * length_out, k * c_in)
    out = cols @ kernel.reshape(k * c_in, c_out)
    if bias is not None:
        out = out + bias
    return out.reshape(b, length_out, c_out)


def avg_pool1d(x, k: int) -> Tensor:
    """Non-overlapping mean pooling along the spectral axis (kernel == stride).

    A trailing partial window is averaged over the elements it actually has.
    Each window is summed and then divided by its size.
    """
    if k <= 0:
        raise ParameterError(f"pool size must be positive, got {k}")
    x = as_tensor(x)
    if k == 1:
        return x
    b, d, c = x.shape
    n = -(-d // k)
    pad = n * k - d
    if pad:
        x = T.concat([x, Tensor(np.zeros((b, pad, c)))], axis=1)
    sums = x.reshape(b, n, k, c).sum(axis=2)
    counts = np.full((1, n, 1), float(k))
    counts[0, -1, 0] = k - pad
    return sums / Tensor(counts)


def lrelu(x, slope: float = LRELU_SLOPE) -> Tensor:
    x = as_tensor(x)
    mask = np.where(x.data >= 0, 1.0, slope)
    return x * Tensor(mask)


def relu(x) -> Tensor:
    x = as_tensor(x)
    return x * Tensor((x.data >= 0).astype(np.float64))


def prelu(x, slope) -> Tensor:
    """Parametric ReLU with a trainable per-channel slope (last axis)."""
    x = as_tensor(x)
    pos = relu(x)
    return pos + slope * (x - pos)


def activation(kind: str, x, slope_param=None) -> Tensor:
    if kind == "lrelu":
        return lrelu(x, LRELU_SLOPE if slope_param is None else slope_param)
    if kind == "prelu":
        if slope_param is None:
            raise ParameterError("prelu needs a slope parameter")
        return prelu(x, slope_param)
    if kind == "sigmoid":
        return T.sigmoid(x)
    if kind == "tanh":
        return T.tanh(x)
    raise ParameterError(f"unknown activation '{kind}'")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    # the shift is a constant, softmax is invariant to it
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = T.exp(x - shift)
    return e / e.sum(axis=axis, keepdims=True)


def linear(x, weight, bias=None) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input has {x.shape[-1]} features, weight expects {weight.shape[0]}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


@dataclass
class BatchNormState:
    """Trainable scale/shift plus running statistics for one BN layer."""

    channels: int
    gamma: Tensor = None
    beta: Tensor = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        if self.gamma is None:
            self.gamma = Tensor(np.ones(self.channels), requires_grad=True)
        if self.beta is None:
            self.beta = Tensor(np.zeros(self.channels), requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


def batch_norm(x, state: BatchNormState, mode: str = "train", update: bool = True) -> Tensor:
    """Per-channel normalization over batch and position axes."""
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise BatchError(f"batch norm in train mode needs B >= 2, got {x.shape[0]}")
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        xhat = centered * T.power(var + state.eps, -0.5)
        if update:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1 - m) * mu.data.reshape(-1)
            state.running_var = m * state.running_var + (1 - m) * var.data.reshape(-1)
    elif mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - Tensor(state.running_mean)) * Tensor(inv)
    else:
        raise ParameterError(f"unknown batch-norm mode '{mode}'")
    return xhat * state.gamma + state.beta


def spectral_norm(x, eps: float = SN_EPS) -> Tensor:
    """Standardize each sample and channel along the spectral axis only."""
    x = as_tensor(x)
    if x.shape[1] < 2:
        raise ContractError("spectral norm needs at least 2 spectral positions")
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered * T.power(var + eps, -0.5)


def l1_normalize(x, axis: int = -1, eps: float = L1_EPS) -> Tensor:
    """Divide each slice by its (nonnegative) sum.

    All-zero slices come back as zeros and raise a
    :class:`DegenerateInputWarning`.
    """
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ContractError("l1_normalize requires nonnegative entries")
    s = x.sum(axis=axis, keepdims=True)
    if np.any(s.data == 0):
        warnings.warn("l1_normalize met an all-zero slice", DegenerateInputWarning, stacklevel=2)
    return x / (s + eps)


def l1_scale(x, axis: int = -1, eps: float = L1_EPS) -> Tensor:
    """Divide each slice by its l1 norm; tolerates negative entries."""
    x = as_tensor(x)
    return x / (x.abs().sum(axis=axis, keepdims=True) + eps)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# Gradient penalty
# ---------------------------------------------------------------------------
def gradient_penalty(tape: T.Tape, scores: Tensor, x_tilde: Tensor) -> Tensor:
    """Mean of ``(||d scores / d x_tilde||_2 - 1)^2`` over samples.

    ``scores`` holds one critic value per sample and must have been computed
    from ``x_tilde`` on ``tape``. The result stays on the tape, so it can be
    differentiated w.r.t. the critic parameters (double backward).
    """
    gaps = tape.second_order_gaps(scores)
    if gaps:
        raise UnsupportedOpError(gaps)
    with T.recording(tape):
        total = scores.sum()
    (g,) = tape.gradient(total, [x_tilde], create_graph=True)
    with T.recording(tape):
        flat = g.reshape(g.shape[0], -1)
        norm = T.safe_sqrt((flat * flat).sum(axis=1))
        return ((norm - 1.0) * (norm - 1.0)).mean()


def grad_norm_penalty_backward(tape: T.Tape, scores: Tensor, x_tilde: Tensor, params):
    """Penalty value and its gradients w.r.t. ``params``."""
    penalty = gradient_penalty(tape, scores, x_tilde)
    grads = tape.gradient(penalty, list(params))
    return penalty, {p.node_id: g for p, g in zip(params, grads)}
