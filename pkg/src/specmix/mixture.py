"""Multinomial mixture kernel turning latent features into abundances.

Each material k owns N components. Component n contributes a logistic
similarity ``1 / (1 + exp(w1[k,n] . z + b1[k,n]))`` weighted by
``pi[k,n] = softmax_n(w2[k,n] . z + b2[k,n])``; the weighted sums are then
l1-normalized over materials.

The affine ``w1 . z + b1`` stands in for the Mahalanobis distance to a
Gaussian component; no explicit means or covariances are stored.
"""
from __future__ import annotations

import warnings

import numpy as np

from specmix.autodiff import functional as F
from specmix.autodiff import tensor as T
from specmix.autodiff.tensor import Tensor, as_tensor
from specmix.errors import ConfigError, ShapeError

NORM_EPS = 1e-12


class MixtureKernel:
    def __init__(self, materials: int, components: int, latent_dim: int, rng=None):
        if materials < 2:
            raise ConfigError(f"need at least 2 materials, got {materials}")
        if components < materials:
            raise ConfigError(
                f"components per material ({components}) must be >= materials ({materials})"
            )
        rng = np.random.default_rng() if rng is None else rng
        self.K, self.N, self.M = materials, components, latent_dim
        shape = (materials, components, latent_dim)
        self.params: dict[str, Tensor] = {
            "w1": F.he_normal(rng, shape, latent_dim),
            "b1": F.zeros_param((materials, components)),
            "w2": F.he_normal(rng, shape, latent_dim),
            "b2": F.zeros_param((materials, components)),
        }

    def trainable(self) -> dict[str, Tensor]:
        return dict(self.params)

    def __call__(self, z) -> Tensor:
        return abundances(z, self.params)


def _affine(z: Tensor, w: Tensor, b: Tensor) -> Tensor:
    k, n, m = w.shape
    if z.shape[-1] != m:
        raise ShapeError(f"latent has {z.shape[-1]} dims, kernel expects {m}")
    logits = z @ T.transpose(w.reshape(k * n, m), (1, 0)) + b.reshape(k * n)
    return logits.reshape(z.shape[0], k, n)


def component_similarity(z, params) -> Tensor:
    """``B x K x N`` logistic similarities in (0, 1)."""
    z = as_tensor(z)
    return T.sigmoid(-_affine(z, params["w1"], params["b1"]))


def mixture_weights(z, params) -> Tensor:
    """``B x K x N`` component weights; each (b, k) row sums to one."""
    z = as_tensor(z)
    return F.softmax(_affine(z, params["w2"], params["b2"]), axis=2)


def abundances(z, params) -> Tensor:
    """``B x K`` simplex-valued abundances."""
    z = as_tensor(z)
    raw = (mixture_weights(z, params) * component_similarity(z, params)).sum(axis=2)
    dead = raw.data.sum(axis=1) < NORM_EPS
    if np.any(dead):
        warnings.warn(
            f"{int(dead.sum())} pixel(s) have vanishing mixture response; using uniform abundances",
            F.DegenerateInputWarning,
            stacklevel=2,
        )
        fill = np.zeros_like(raw.data)
        fill[dead] = 1.0
        raw = raw + Tensor(fill)
    # every row sum is now >= NORM_EPS, so no guard in the divisor; a guard
    # there would bias rows whose responses are all small
    return F.l1_normalize(raw, axis=1, eps=0.0)
