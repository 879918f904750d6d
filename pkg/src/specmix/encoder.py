"""DSCN++ feature extractor: a D-band spectrum to an M-dimensional latent.

Layer plan for D bands (output shapes with D = 200 in brackets)::

    conv 21 x 10                       D x 10       [200 x 10]
    lrelu, avgpool 5, batch norm       D/5 x 10     [40 x 10]
    conv 3 | conv 5 | conv 7 (x 10)    D/5 x 10 each
    concat                             D/5 x 30     [40 x 30]
    lrelu, avgpool 2, spectral norm    D/10 x 30    [20 x 30]
    conv 3 x 10                        D/10 x 10    [20 x 10]
    lrelu, avgpool 2, spectral norm    D/20 x 10    [10 x 10]
    flatten, linear M, lrelu           M            [10]

Divisions are ceiling divisions. Normalization sits after the pooling that
follows each activation, i.e. in front of the next convolution. The
``post_normalization`` variant moves it between convolution and activation;
it exists only to compare active-response rates.
"""
from __future__ import annotations

import numpy as np

from specmix.autodiff import concat
from specmix.autodiff import functional as F
from specmix.autodiff.tensor import Tensor, as_tensor
from specmix.errors import ConfigError

MIN_BANDS = 21
CHANNELS = 10
INCEPTION_KERNELS = (3, 5, 7)


def _ceil_div(a, b):
    return -(-a // b)


def latent_input_size(bands: int) -> int:
    """Number of flattened features feeding the final linear layer."""
    return _ceil_div(_ceil_div(_ceil_div(bands, 5), 2), 2) * CHANNELS


class Encoder:
    """Trainable DSCN++ encoder.

    Args:
        bands: number of spectral bands D (at least 21).
        latent_dim: size M of the latent feature.
        rng: generator used for weight initialization.
        post_normalization: build the comparison variant that normalizes
            right after each convolution instead of after pooling.
    """

    def __init__(self, bands: int, latent_dim: int = 10, rng=None, post_normalization=False):
        if bands < MIN_BANDS:
            raise ConfigError(f"encoder needs at least {MIN_BANDS} bands, got {bands}")
        rng = np.random.default_rng() if rng is None else rng
        self.bands = bands
        self.latent_dim = latent_dim
        self.post_normalization = post_normalization
        c = CHANNELS
        p = {}
        p["conv1.w"] = F.he_normal(rng, (21, 1, c), 21)
        p["conv1.b"] = F.zeros_param(c)
        for k in INCEPTION_KERNELS:
            p[f"inc{k}.w"] = F.he_normal(rng, (k, c, c), k * c)
            p[f"inc{k}.b"] = F.zeros_param(c)
        p["conv3.w"] = F.he_normal(rng, (3, 3 * c, c), 3 * 3 * c)
        p["conv3.b"] = F.zeros_param(c)
        n_flat = latent_input_size(bands)
        p["fc.w"] = F.he_normal(rng, (n_flat, latent_dim), n_flat)
        p["fc.b"] = F.zeros_param(latent_dim)
        self.params: dict[str, Tensor] = p
        self.bn = F.BatchNormState(c)

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out["bn.gamma"] = self.bn.gamma
        out["bn.beta"] = self.bn.beta
        return out

    def __call__(self, batch, mode: str = "train", trace=None, activity=None) -> Tensor:
        return encode(batch, self, mode, trace=trace, activity=activity)


def encode(batch, enc: Encoder, mode: str = "train", trace=None, activity=None) -> Tensor:
    """Map ``B x D`` spectra to ``B x M`` latent features.

    ``trace`` (a list) receives ``(layer, shape)`` pairs in execution order;
    ``activity`` (a list) receives the positive fraction of each
    post-activation response that feeds a pooling layer.
    """
    x = as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != enc.bands:
        raise ConfigError(f"encoder built for {enc.bands} bands, got input of shape {x.shape}")
    p = enc.params
    post = enc.post_normalization

    def log(name, t):
        if trace is not None:
            trace.append((name, t.shape[1:]))
        return t

    def act(t, name):
        t = F.lrelu(t)
        if activity is not None:
            activity.append(float(np.mean(t.data > 0)))
        return log(name, t)

    h = x.reshape(x.shape[0], x.shape[1], 1)
    h = log("conv21", F.conv1d(h, p["conv1.w"], p["conv1.b"]))
    if post:
        h = log("batchnorm", F.batch_norm(h, enc.bn, mode))
    h = act(h, "lrelu")
    h = log("avgpool5", F.avg_pool1d(h, 5))
    if not post:
        h = log("batchnorm", F.batch_norm(h, enc.bn, mode))

    branches = [
        log(f"conv{k}", F.conv1d(h, p[f"inc{k}.w"], p[f"inc{k}.b"])) for k in INCEPTION_KERNELS
    ]
    h = log("concat", concat(branches, axis=2))
    if post:
        h = log("spectralnorm", F.spectral_norm(h))
    h = act(h, "lrelu")
    h = log("avgpool2", F.avg_pool1d(h, 2))
    if not post:
        h = log("spectralnorm", F.spectral_norm(h))

    h = log("conv3", F.conv1d(h, p["conv3.w"], p["conv3.b"]))
    if post:
        h = log("spectralnorm", F.spectral_norm(h))
    h = act(h, "lrelu")
    h = log("avgpool2", F.avg_pool1d(h, 2))
    if not post:
        h = log("spectralnorm", F.spectral_norm(h))

    h = log("flatten", h.reshape(h.shape[0], -1))
    z = F.lrelu(F.linear(h, p["fc.w"], p["fc.b"]))
    return log("linear", z)


def active_response_fraction(batch, enc: Encoder) -> float:
    """Percent of strictly positive activation outputs in a train-mode pass.

    Averages the three activation layers that precede pooling. Running BN
    statistics are left untouched.
    """
    saved = (enc.bn.running_mean.copy(), enc.bn.running_var.copy())
    activity: list[float] = []
    try:
        encode(batch, enc, "train", activity=activity)
    finally:
        enc.bn.running_mean, enc.bn.running_var = saved
    return 100.0 * float(np.mean(activity))
