"""Reconstruction head: linear endmember mixing plus two bounded corrections.

``x_hat = y @ E + alpha_r * R(y) + alpha_u * U(y, eta)``

``R`` refines the fixed endmembers and ``U`` models per-pixel uncertainty
from Gaussian noise ``eta``. Both are ``in -> 20 -> D`` networks with a tanh
output, and their scales are confined to ``[0, 0.05]`` and ``[0, 0.1]``.
"""
from __future__ import annotations

import numpy as np

from specmix.autodiff import concat
from specmix.autodiff import functional as F
from specmix.autodiff import tensor as T
from specmix.autodiff.tensor import Tensor, as_tensor
from specmix.errors import FormatError, ShapeError

HIDDEN = 20
ALPHA_R_MAX = 0.05
ALPHA_U_MAX = 0.1


def check_endmembers(endmembers) -> np.ndarray:
    e = np.asarray(endmembers, dtype=np.float64)
    if e.ndim != 2:
        raise ShapeError(f"endmember matrix must be K x D, got shape {e.shape}")
    if not np.isfinite(e).all():
        raise FormatError("endmember matrix has non-finite entries")
    if np.any(e < 0):
        raise FormatError("endmember matrix has negative reflectances")
    if np.any(~e.any(axis=1)):
        raise FormatError("endmember matrix has an all-zero row")
    return e


class CorrectionNet:
    """Two-layer ``in -> 20 -> D`` net with LReLU hidden and tanh output.

    The bounded scale is stored as an unconstrained logit mapped through
    ``limit * sigmoid(logit)`` and starts at ``limit / 2``. The output layer
    starts at zero, so a fresh decoder is pure linear mixing.
    """

    def __init__(self, n_in: int, bands: int, limit: float, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.limit = limit
        self.params: dict[str, Tensor] = {
            "w1": F.he_normal(rng, (n_in, HIDDEN), n_in),
            "b1": F.zeros_param(HIDDEN),
            "w2": F.zeros_param((HIDDEN, bands)),
            "b2": F.zeros_param(bands),
            "alpha_logit": F.zeros_param(()),
        }

    def trainable(self):
        return dict(self.params)

    def alpha(self) -> Tensor:
        return T.sigmoid(self.params["alpha_logit"]) * self.limit

    def __call__(self, inputs) -> Tensor:
        return correction_forward(inputs, self.params)


def correction_forward(inputs, params) -> Tensor:
    h = F.lrelu(F.linear(as_tensor(inputs), params["w1"], params["b1"]))
    return T.tanh(F.linear(h, params["w2"], params["b2"]))


def uncertainty_forward(abund, noise, params) -> Tensor:
    """``U(y, eta)``: outputs in (-1, 1)."""
    return correction_forward(concat([as_tensor(abund), as_tensor(noise)], axis=1), params)


def residual_forward(abund, params) -> Tensor:
    """``R(y)``: deterministic, outputs in (-1, 1)."""
    return correction_forward(abund, params)


class Decoder:
    def __init__(self, endmembers, noise_dim: int | None = None, rng=None, use_corrections=True):
        rng = np.random.default_rng() if rng is None else rng
        e = check_endmembers(endmembers)
        self.endmembers = Tensor(e)
        k, d = e.shape
        self.noise_dim = k if noise_dim is None else noise_dim
        self.use_corrections = use_corrections
        self.residual = CorrectionNet(k, d, ALPHA_R_MAX, rng)
        self.uncertainty = CorrectionNet(k + self.noise_dim, d, ALPHA_U_MAX, rng)

    def __call__(self, abund, noise) -> Tensor:
        return reconstruct(abund, self.endmembers, noise, self)


def reconstruct(abund, endmembers, noise, dec: Decoder | None = None,
                alpha_r=None, alpha_u=None) -> Tensor:
    """Mix endmembers by abundance and add the scaled corrections.

    Without a decoder (or with corrections disabled) this is pure linear
    mixing.
    """
    y = as_tensor(abund)
    e = as_tensor(endmembers)
    if y.shape[1] != e.shape[0]:
        raise ShapeError(f"{y.shape[1]} abundances for {e.shape[0]} endmembers")
    x_hat = y @ e
    if dec is None or not dec.use_corrections:
        return x_hat
    a_r = dec.residual.alpha() if alpha_r is None else as_tensor(alpha_r)
    a_u = dec.uncertainty.alpha() if alpha_u is None else as_tensor(alpha_u)
    x_hat = x_hat + a_r * residual_forward(y, dec.residual.params)
    return x_hat + a_u * uncertainty_forward(y, noise, dec.uncertainty.params)
