"""Pre-training loop: augmentation, the masked-conditioning diffusion objective
with recurrent uniform time-step sampling, AdamW with cosine decay, and
resumable checkpoints.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import TrainConfig
from .diffusion import NoiseSchedule, interval_bounds, q_sample, recurrent_uniform_sample
from .networks import PointDif
from .patching import fps, knn_group, mask_patches

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def build_model(config: TrainConfig) -> PointDif:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return PointDif(config.dims)


def make_schedule(config: TrainConfig) -> NoiseSchedule:
    return NoiseSchedule(config.T, config.beta_start, config.beta_end)


def augment(points, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    """Random isotropic scaling followed by a per-axis translation."""
    scale = rng.uniform(config.scale_low, config.scale_high)
    shift = rng.uniform(-config.translate, config.translate, size=3)
    return np.asarray(points) * scale + shift


def sample_timesteps(config: TrainConfig, rng: np.random.Generator, batch: int) -> np.ndarray:
    """``(batch, h)`` time steps: one per interval, or all inside ``config.interval`` if set."""
    if config.interval is not None:
        lo, hi = config.interval
        return rng.integers(lo, hi + 1, size=(batch, config.h))
    return np.stack([recurrent_uniform_sample(config.T, config.h, rng, config.absorb_remainder)
                     for _ in range(batch)])


def prepare_batch(clouds, config: TrainConfig, rng: np.random.Generator, mask_ratio=None,
                  do_augment: bool = True):
    """Augment, group and mask a batch. Returns float32 tensors and index arrays."""
    ratio = config.mask_ratio if mask_ratio is None else mask_ratio
    xs, centers, patches, vis, msk = [], [], [], [], []
    for pts in clouds:
        pts = augment(pts, rng, config) if do_augment else np.asarray(pts, dtype=np.float64)
        start = int(rng.integers(len(pts))) if config.random_fps_start else 0
        ci = fps(pts, config.num_patches, start)
        xs.append(pts)
        centers.append(pts[ci])
        patches.append(knn_group(pts, pts[ci], config.patch_size))
        v, m = mask_patches(config.num_patches, ratio, rng)
        vis.append(v)
        msk.append(m)
    as_t = lambda a: torch.as_tensor(np.stack(a), dtype=torch.float32)  # noqa: E731
    return as_t(xs), as_t(centers), as_t(patches), np.stack(vis), np.stack(msk)


def diffusion_loss(model: PointDif, x0, c, ts, eps, schedule: NoiseSchedule, denoise=None):
    """Mean squared noise-prediction error over points, coordinates, draws and batch.

    ``x0``: (B, n, 3); ``c``: (B, C); ``ts``: (B, h); ``eps``: (B, h, n, 3).
    ``denoise(x_t, c, t)`` overrides the model's denoiser (used for oracle checks).
    """
    B, h = ts.shape
    x_t = q_sample(x0.unsqueeze(1).expand_as(eps), ts, eps, schedule)
    flat_x = x_t.reshape(B * h, *x_t.shape[2:])
    flat_c = c.repeat_interleave(h, dim=0)
    flat_t = torch.as_tensor(ts.reshape(-1))
    fn = denoise or model.denoise
    eps_hat = fn(flat_x, flat_c, flat_t).reshape(eps.shape)
    return ((eps - eps_hat) ** 2).mean()


def pretrain_step(model: PointDif, clouds, config: TrainConfig, schedule: NoiseSchedule,
                  rng: np.random.Generator, denoise=None):
    """Forward pass of the pre-training objective for one batch; returns the scalar loss."""
    x0, centers, patches, vis, msk = prepare_batch(clouds, config, rng)
    c = model.condition(centers, patches, vis, msk)
    ts = sample_timesteps(config, rng, len(clouds))
    eps = torch.as_tensor(rng.standard_normal((len(clouds), config.h) + tuple(x0.shape[1:])),
                          dtype=torch.float32)
    loss = diffusion_loss(model, x0, c, ts, eps, schedule, denoise)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}; check schedule and initialization")
    return loss


@dataclass
class TrainState:
    config: TrainConfig
    model: PointDif
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)  # (epoch, mean_loss, lr)

    @property
    def losses(self) -> list:
        return [row[1] for row in self.history]


def new_state(config: TrainConfig) -> TrainState:
    model = build_model(config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay,
                            foreach=False)
    return TrainState(config, model, opt, np.random.default_rng(config.seed))


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return -(-n_train // batch_size)


def fit(dataset, config: TrainConfig, state: TrainState | None = None, epochs: int | None = None,
        log_path=None) -> TrainState:
    """Train for ``epochs`` more epochs (default: until ``config.epochs``).

    The learning-rate schedule always spans ``config.epochs`` so a resumed run
    follows the same trajectory as an unbroken one.
    """
    train_x, _ = dataset.split("train")
    if len(train_x) == 0:
        raise TrainingError("empty training split")
    state = state or new_state(config)
    schedule = make_schedule(config)
    per_epoch = steps_per_epoch(len(train_x), config.batch_size)
    total = config.epochs * per_epoch
    stop = config.epochs if epochs is None else min(config.epochs, state.epoch + epochs)
    model, opt = state.model, state.optimizer
    model.train()
    while state.epoch < stop:
        order = state.rng.permutation(len(train_x))
        losses = []
        for b in range(per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            lr = cosine_lr(config.lr, state.step, total)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = pretrain_step(model, train_x[idx], config, schedule, state.rng)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            state.step += 1
            losses.append(loss.item())
        state.epoch += 1
        state.history.append((state.epoch, float(np.mean(losses)), lr))
        log.info("epoch %d loss %.5f lr %.2e", state.epoch, state.history[-1][1], lr)
    if log_path is not None:
        write_log(state.history, log_path)
    return state


def write_log(history, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr"])
        for epoch, loss, lr in history:
            w.writerow([epoch, repr(float(loss)), repr(float(lr))])


def save_checkpoint(state: TrainState, path) -> None:
    tensors = {f"model/{k}": v for k, v in state.model.state_dict().items()}
    opt_sd = state.optimizer.state_dict()
    for i, slot in opt_sd["state"].items():
        for key, val in slot.items():
            tensors[f"optim/{i}/{key}"] = torch.as_tensor(val, dtype=torch.float32)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
              for g in opt_sd["param_groups"]]
    cfg = state.config
    meta = {
        "dims": cfg.dims.to_dict(),
        "schedule": {"T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
        "config": cfg.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "history": [list(r) for r in state.history],
        "rng": state.rng.bit_generator.state,
        "optim_groups": groups,
    }
    ckpt.write(path, tensors, meta)


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    """Restore a :class:`TrainState`. If ``config`` is given its model dims must match."""
    tensors, meta = ckpt.read(path)
    saved = TrainConfig.from_dict(meta["config"])
    config = config or saved
    model = PointDif(config.dims)
    ckpt.load_into(model, tensors)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay,
                            foreach=False)
    slots = {}
    for name, val in tensors.items():
        if name.startswith("optim/"):
            _, i, key = name.split("/", 2)
            slots.setdefault(int(i), {})[key] = val.clone()
    groups = meta["optim_groups"]
    for g in groups:
        g["betas"] = tuple(g["betas"])
    if slots:
        opt.load_state_dict({"state": slots, "param_groups": groups})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(config, model, opt, rng, meta["epoch"], meta["step"],
                      [tuple(r) for r in meta["history"]])


def load_model(path) -> tuple[PointDif, TrainConfig]:
    """Load only the model weights and config, in evaluation mode."""
    tensors, meta = ckpt.read(path)
    config = TrainConfig.from_dict(meta["config"])
    model = PointDif(config.dims)
    ckpt.load_into(model, tensors)
    model.eval()
    return model, config


__all__ = ["augment", "pretrain_step", "fit", "TrainState", "new_state", "save_checkpoint",
           "load_checkpoint", "load_model", "diffusion_loss", "sample_timesteps", "interval_bounds"]
