"""Reconstruction loss and per-group loss routing."""
from __future__ import annotations

import math

import numpy as np

from specmix.autodiff import tensor as T
from specmix.autodiff.tensor import Tensor, as_tensor
from specmix.errors import ContractError

# smallest similarity fed to the log; reached only for antiparallel spectra
_C_FLOOR = 1e-12

GROUP_WEIGHTS = {
    # group: (weight on L_re, weight on generator-side L_adv)
    "mixture": (0.01, 0.1),
    "encoder": (1.0, 0.0),
    "residual": (0.001, 0.0),
    "uncertainty": (0.0, 0.001),
}


def group_lr_scale(group: str) -> float:
    """Step-size multiplier for a group: the sum of its loss coefficients.

    Adam is invariant to a constant loss factor, so the coefficients only
    slow a group down when they also scale its step size.
    """
    if group == "critic":
        return 1.0
    return float(sum(GROUP_WEIGHTS[group]))


def sad_similarity(x, x_hat) -> Tensor:
    """Angle-based similarity ``1 - angle / pi`` per row, in [0, 1]."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    nx = T.safe_sqrt((x * x).sum(axis=1))
    ny = T.safe_sqrt((x_hat * x_hat).sum(axis=1))
    if np.any(nx.data == 0) or np.any(ny.data == 0):
        raise ContractError("spectral angle is undefined for a zero vector")
    cos = T.clip((x * x_hat).sum(axis=1) / (nx * ny), -1.0, 1.0)
    return 1.0 - T.arccos(cos) * (1.0 / math.pi)


def reconstruction_loss(x, x_hat, abund, encoder_weights, cfg) -> Tensor:
    """``E[-log C] + l0 E|x - x_hat|_1 + l1 |y|_1 / B + l2 sum |theta_e|^2``."""
    x, x_hat, abund = as_tensor(x), as_tensor(x_hat), as_tensor(abund)
    c = sad_similarity(x, x_hat)
    loss = -T.log(T.clip(c, _C_FLOOR, 2.0)).mean()
    if cfg.lambda0:
        loss = loss + (x - x_hat).abs().sum(axis=1).mean() * cfg.lambda0
    if cfg.lambda1:
        loss = loss + abund.abs().sum(axis=1).mean() * cfg.lambda1
    if cfg.lambda2 and encoder_weights:
        reg = None
        for w in encoder_weights:
            term = (w * w).sum()
            reg = term if reg is None else reg + term
        loss = loss + reg * cfg.lambda2
    return loss


def group_losses(l_re, l_adv_gen, l_adv=None) -> dict:
    """Loss each parameter group descends (the critic ascends ``l_adv``)."""
    out = {
        "mixture": l_re * 0.01 + l_adv_gen * 0.1,
        "encoder": l_re,
        "residual": l_re * 0.001,
        "uncertainty": l_adv_gen * 0.001,
    }
    if l_adv is not None:
        out["critic"] = l_adv
    return out
