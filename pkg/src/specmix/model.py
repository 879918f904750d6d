"""The full unmixing model: encoder, mixture kernel, decoder and critic."""
from __future__ import annotations

import numpy as np

from specmix.autodiff.tensor import Tensor, as_tensor, no_record
from specmix.config import TrainConfig
from specmix.critic import Critic
from specmix.decoder import Decoder, check_endmembers
from specmix.encoder import Encoder
from specmix.errors import ConfigError, FormatError
from specmix.mixture import MixtureKernel


class UnmixModel:
    """All parameter groups plus the fixed endmember matrix.

    Groups: ``encoder``, ``mixture``, ``residual``, ``uncertainty`` and
    ``critic``. The ``mixture`` group holds only the similarity parameters
    ``w1``/``b1``; the mixing-weight parameters ``w2``/``b2`` train and
    regularize with the encoder. With ``use_encoder`` off the mixture kernel
    reads the raw spectrum directly (latent size D).
    """

    def __init__(self, endmembers, cfg: TrainConfig, rng: np.random.Generator):
        e = check_endmembers(endmembers)
        k, d = e.shape
        if k != cfg.K:
            raise ConfigError(f"config K={cfg.K} but {k} endmembers were supplied")
        self.cfg = cfg
        self.bands = d
        self.encoder = Encoder(d, cfg.M, rng, post_normalization=cfg.post_normalization) if cfg.use_encoder else None
        latent = cfg.M if cfg.use_encoder else d
        self.mixture = MixtureKernel(k, cfg.N, latent, rng)
        self.decoder = Decoder(e, cfg.noise_dim, rng, use_corrections=cfg.use_corrections)
        self.critic = Critic(d, rng) if cfg.use_adversarial else None

    @property
    def endmembers(self) -> np.ndarray:
        return self.decoder.endmembers.data

    def groups(self) -> dict[str, dict[str, Tensor]]:
        mix = self.mixture.params
        enc = {f"enc.{n}": p for n, p in self.encoder.trainable().items()} if self.encoder else {}
        enc.update({"mix.w2": mix["w2"], "mix.b2": mix["b2"]})
        out = {
            "encoder": enc,
            "mixture": {"w1": mix["w1"], "b1": mix["b1"]},
            "residual": self.decoder.residual.trainable() if self.cfg.use_corrections else {},
            "uncertainty": self.decoder.uncertainty.trainable() if self.cfg.use_corrections else {},
            "critic": self.critic.trainable() if self.critic else {},
        }
        return out

    def regularized_weights(self) -> list[Tensor]:
        out = list(self.encoder.params.values()) if self.encoder else []
        return out + [self.mixture.params["w2"], self.mixture.params["b2"]]

    # -- forward passes -------------------------------------------------
    def latent(self, normalized, raw, mode="train") -> Tensor:
        if self.encoder is None:
            return as_tensor(raw)
        return self.encoder(normalized, mode)

    def abundances(self, normalized, raw, mode="train") -> Tensor:
        return self.mixture(self.latent(normalized, raw, mode))

    def unmix(self, normalized: np.ndarray, raw: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Inference-mode abundances for many pixels."""
        out = []
        with no_record():
            for i in range(0, len(raw), chunk):
                y = self.abundances(normalized[i : i + chunk], raw[i : i + chunk], "infer")
                out.append(y.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.cfg.K))

    def latents(self, normalized: np.ndarray, raw: np.ndarray, chunk: int = 1024) -> np.ndarray:
        out = []
        with no_record():
            for i in range(0, len(raw), chunk):
                out.append(self.latent(normalized[i : i + chunk], raw[i : i + chunk], "infer").data)
        return np.concatenate(out, axis=0)

    # -- persistence ----------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for group, params in self.groups().items():
            for name, p in params.items():
                state[f"{group}.{name}"] = p.data
        bns = []
        if self.encoder:
            bns.append(("encoder.bn", self.encoder.bn))
        if self.critic:
            bns.extend((f"critic.bn{i}", bn) for i, bn in enumerate(self.critic.bn))
        for prefix, bn in bns:
            state[f"{prefix}.running_mean"] = bn.running_mean
            state[f"{prefix}.running_var"] = bn.running_var
        state["decoder.endmembers"] = self.endmembers
        return state

    def load_state_dict(self, state: dict) -> None:
        mine = self.state_dict()
        missing = set(mine) - set(state)
        if missing:
            raise FormatError(f"checkpoint lacks entries: {sorted(missing)[:5]}")
        for key, ref in mine.items():
            if np.shape(state[key]) != np.shape(ref):
                raise FormatError(f"checkpoint entry {key} has shape {np.shape(state[key])}, expected {np.shape(ref)}")
        for group, params in self.groups().items():
            for name, p in params.items():
                p.data = np.array(state[f"{group}.{name}"], dtype=np.float64)
        self.decoder.endmembers.data = check_endmembers(state["decoder.endmembers"])
        if self.encoder:
            self.encoder.bn.running_mean = np.array(state["encoder.bn.running_mean"])
            self.encoder.bn.running_var = np.array(state["encoder.bn.running_var"])
        if self.critic:
            for i, bn in enumerate(self.critic.bn):
                bn.running_mean = np.array(state[f"critic.bn{i}.running_mean"])
                bn.running_var = np.array(state[f"critic.bn{i}.running_var"])
