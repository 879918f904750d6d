"""PatchGAN-style critic and the gradient-penalized Wasserstein objective.

Layers (D = 200 shapes in brackets)::

    conv 21 x 5, stride 5;  BN + PReLU     D/5 x 5    [40 x 5]
    conv 5 x 10, stride 2;  BN + PReLU     D/10 x 10  [20 x 10]
    conv 5 x 20, stride 2;  BN + PReLU     D/20 x 20  [10 x 20]
    linear 5 per position                  D/20 x 5   [10 x 5]

The patch-score map is averaged to one score per spectrum. BN always uses
batch statistics here; the critic never runs from running averages.
"""
from __future__ import annotations

import numpy as np

from specmix.autodiff import functional as F
from specmix.autodiff.tensor import Tape, Tensor, as_tensor, recording
from specmix.errors import ConfigError

MIN_BANDS = 21
LAYERS = ((5, 21, 5), (10, 5, 2), (20, 5, 2))  # (channels, kernel, stride)
PATCH_OUT = 5
LAMBDA_PQ = 10.0


class Critic:
    def __init__(self, bands: int, rng=None):
        if bands < MIN_BANDS:
            raise ConfigError(f"critic needs at least {MIN_BANDS} bands, got {bands}")
        rng = np.random.default_rng() if rng is None else rng
        self.bands = bands
        p = {}
        self.bn = []
        c_in = 1
        for i, (c_out, k, _) in enumerate(LAYERS):
            p[f"conv{i}.w"] = F.he_normal(rng, (k, c_in, c_out), k * c_in)
            p[f"conv{i}.b"] = F.zeros_param(c_out)
            p[f"prelu{i}"] = Tensor(np.full(c_out, F.PRELU_INIT), requires_grad=True)
            self.bn.append(F.BatchNormState(c_out))
            c_in = c_out
        p["fc.w"] = F.he_normal(rng, (c_in, PATCH_OUT), c_in)
        p["fc.b"] = F.zeros_param(PATCH_OUT)
        self.params: dict[str, Tensor] = p

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for i, bn in enumerate(self.bn):
            out[f"bn{i}.gamma"] = bn.gamma
            out[f"bn{i}.beta"] = bn.beta
        return out

    def patch_scores(self, spectra) -> Tensor:
        x = as_tensor(spectra)
        if x.ndim != 2 or x.shape[1] < MIN_BANDS:
            raise ConfigError(f"critic needs B x D input with D >= {MIN_BANDS}, got {x.shape}")
        p = self.params
        h = x.reshape(x.shape[0], x.shape[1], 1)
        for i, (_, _, stride) in enumerate(LAYERS):
            h = F.conv1d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=stride)
            h = F.batch_norm(h, self.bn[i], "train", update=False)
            h = F.prelu(h, p[f"prelu{i}"])
        return F.linear(h, p["fc.w"], p["fc.b"])

    def __call__(self, spectra) -> Tensor:
        return discriminate(spectra, self)


def discriminate(spectra, critic: Critic) -> Tensor:
    """One score per spectrum: the mean of its patch-score map."""
    return critic.patch_scores(spectra).mean(axis=(1, 2))


def interpolate_samples(x, x_hat, u) -> np.ndarray:
    """Per-sample convex combination ``u * x + (1 - u) * x_hat``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64).reshape(-1, *([1] * (x.ndim - 1)))
    return u * x + (1.0 - u) * x_hat


def adversarial_loss(tape: Tape, critic, real, fake, u, lambda_pq: float = LAMBDA_PQ):
    """Gradient-penalized Wasserstein objective, recorded on ``tape``.

    ``real`` and ``fake`` are l1-normalized spectra treated as constants.
    ``critic`` is anything mapping ``B x D`` to ``B`` scores.
    Returns ``(loss, penalty)``; the critic ascends ``loss``.
    """
    real = as_tensor(real).detach()
    fake = as_tensor(fake).detach()
    x_tilde = Tensor(interpolate_samples(real.data, fake.data, u), requires_grad=True)
    with recording(tape):
        d_real = critic(real).mean()
        d_fake = critic(fake).mean()
        scores = critic(x_tilde)
    penalty = F.gradient_penalty(tape, scores, x_tilde)
    with recording(tape):
        loss = d_real - d_fake - penalty * lambda_pq
    return loss, penalty
