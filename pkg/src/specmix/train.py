"""Adversarial training loop.

Each iteration draws one mini-batch and

1. runs the generator (encoder, mixture kernel, decoder) on a tape,
2. takes one critic step ascending the penalized Wasserstein objective on
   l1-normalized real and reconstructed spectra,
3. updates every generator group with its own weighted loss.

Run directory: ``config.json``, ``history.csv`` and ``checkpoint_<iter>.bin``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from specmix.autodiff import functional as F
from specmix.autodiff.tensor import Tape, Tensor
from specmix.checkpoint import load_checkpoint, save_checkpoint
from specmix.config import TrainConfig
from specmix.critic import adversarial_loss, discriminate
from specmix.data import PixelSet
from specmix.errors import ConfigError, FormatError, NonFiniteError, TrainingDiverged
from specmix.losses import GROUP_WEIGHTS, group_lr_scale, reconstruction_loss
from specmix.model import UnmixModel
from specmix.optim import Adam

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("iteration", "L_re", "L_adv", "penalty")


@dataclass
class StepLosses:
    l_re: float
    l_adv: float
    penalty: float


@dataclass
class TrainResult:
    model: UnmixModel
    history: list[tuple] = field(default_factory=list)
    last_checkpoint: Path | None = None


def rng_streams(seed: int):
    """Independent generators for init, batching, decoder noise and interpolation."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def build_optimizers(model: UnmixModel, cfg: TrainConfig) -> dict[str, Adam]:
    out = {}
    for name, params in model.groups().items():
        if params:
            lr = cfg.lr * group_lr_scale(name) if cfg.group_lr_scaling else cfg.lr
            out[name] = Adam(params, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return out


def train_step(model: UnmixModel, optimizers: dict, x_norm, x_raw, noise, u) -> StepLosses:
    cfg = model.cfg
    groups = model.groups()

    with Tape() as g_tape:
        y = model.abundances(x_norm, x_raw, "train")
        x_hat = model.decoder(y, noise)
        l_re = reconstruction_loss(x_raw, x_hat, y, model.regularized_weights(), cfg)

    l_adv_val = penalty_val = 0.0
    adv_grads = {}
    if model.critic is not None:
        real = F.l1_scale(x_raw).data
        fake = F.l1_scale(x_hat.data).data
        c_tape = Tape()
        l_adv, penalty = adversarial_loss(c_tape, model.critic, real, fake, u, cfg.lambda_pq)
        critic_params = groups["critic"]
        names = list(critic_params)
        with c_tape:
            objective = -l_adv
        grads = c_tape.gradient(objective, [critic_params[n] for n in names])
        optimizers["critic"].step({n: g.data for n, g in zip(names, grads)})
        l_adv_val, penalty_val = float(l_adv.data), float(penalty.data)

        with g_tape:
            l_gen = -discriminate(F.l1_scale(x_hat), model.critic).mean()
        adv_sources = [
            (grp, n, p)
            for grp in ("mixture", "uncertainty")
            for n, p in groups[grp].items()
        ]
        got = g_tape.gradient(l_gen, [p for _, _, p in adv_sources])
        adv_grads = {(grp, n): g.data for (grp, n, _), g in zip(adv_sources, got)}

    re_sources = [
        (grp, n, p)
        for grp in ("encoder", "mixture", "residual")
        for n, p in groups[grp].items()
    ]
    got = g_tape.gradient(l_re, [p for _, _, p in re_sources])
    re_grads = {(grp, n): g.data for (grp, n, _), g in zip(re_sources, got)}

    for grp, (w_re, w_adv) in GROUP_WEIGHTS.items():
        if not groups[grp]:
            continue
        step = {}
        for n, p in groups[grp].items():
            g = np.zeros_like(p.data)
            if w_re and (grp, n) in re_grads:
                g = g + w_re * re_grads[(grp, n)]
            if w_adv and (grp, n) in adv_grads:
                g = g + w_adv * adv_grads[(grp, n)]
            step[n] = g
        optimizers[grp].step(step)

    return StepLosses(float(l_re.data), l_adv_val, penalty_val)


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for it, a, b, c in history:
            w.writerow([it, repr(a), repr(b), repr(c)])


def read_history(path) -> list[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]


def train(pixels: PixelSet, endmembers, cfg: TrainConfig, run_dir=None,
          progress_every: int = 0) -> TrainResult:
    """Train a model on ``pixels`` with fixed ``endmembers``.

    Fully deterministic for a given ``cfg.seed``. Raises
    :class:`TrainingDiverged` (carrying the last checkpoint) if a loss or
    any intermediate value turns non-finite.
    """
    init_rng, batch_rng, noise_rng, mix_rng = rng_streams(cfg.seed)
    model = UnmixModel(endmembers, cfg, init_rng)
    if pixels.bands != model.bands:
        raise ConfigError(f"cube has {pixels.bands} bands, endmembers have {model.bands}")
    result = TrainResult(model)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(run_dir / "config.json")

    optimizers = build_optimizers(model, cfg)
    batches = pixels.batches(cfg.batch_size, batch_rng)
    for it in range(1, cfg.iterations + 1):
        idx = next(batches)
        noise = noise_rng.standard_normal((len(idx), cfg.noise_dim))
        u = mix_rng.uniform(0.0, 1.0, size=len(idx))
        try:
            losses = train_step(model, optimizers, pixels.normalized[idx], pixels.raw[idx], noise, u)
        except NonFiniteError as exc:
            log.error("non-finite values at iteration %d: %s", it, exc)
            _flush(result, run_dir)
            raise TrainingDiverged(it, result.last_checkpoint) from exc
        if not all(np.isfinite([losses.l_re, losses.l_adv, losses.penalty])):
            _flush(result, run_dir)
            raise TrainingDiverged(it, result.last_checkpoint)
        result.history.append((it, losses.l_re, losses.l_adv, losses.penalty))
        if progress_every and it % progress_every == 0:
            log.info("iter %d  L_re=%.5f  L_adv=%.5f  gp=%.5f", it, losses.l_re, losses.l_adv, losses.penalty)
        if run_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            path = run_dir / f"checkpoint_{it}.bin"
            save_checkpoint(model.state_dict(), path)
            result.last_checkpoint = path
            write_history(result.history, run_dir / "history.csv")

    _flush(result, run_dir, final=True)
    return result


def _flush(result: TrainResult, run_dir, final=False):
    if run_dir is None:
        return
    write_history(result.history, run_dir / "history.csv")
    if final:
        it = result.history[-1][0] if result.history else 0
        path = run_dir / f"checkpoint_{it}.bin"
        if result.last_checkpoint != path:
            save_checkpoint(result.model.state_dict(), path)
            result.last_checkpoint = path


def latest_checkpoint(run_dir) -> Path:
    paths = sorted(Path(run_dir).glob("checkpoint_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise FormatError(f"no checkpoint in {run_dir}")
    return paths[-1]


def load_model(run_dir, checkpoint=None) -> UnmixModel:
    """Rebuild a trained model from a run directory."""
    run_dir = Path(run_dir)
    cfg = TrainConfig.load(run_dir / "config.json")
    state = load_checkpoint(checkpoint or latest_checkpoint(run_dir))
    model = UnmixModel(state["decoder.endmembers"], cfg, np.random.default_rng(0))
    model.load_state_dict(state)
    return model
