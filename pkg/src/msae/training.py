"""Optimization loop: Adam with decoupled weight decay, warmup-cosine
schedule, gradient clipping, JSONL metrics, checkpointing and resume.

All randomness is derived statelessly from (seed, epoch, bout_id), so a run
resumed from a checkpoint retraces exactly the trajectory of an
uninterrupted run in single-threaded mode.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import dataio
from .errors import NonFiniteGradient
from .masking import plan_mask
from .model import ModelConfig, ModelParams, forward_backward
from .rng import derive_seed
from .skeleton import SkeletonSequence, pad_to_slice_multiple

OPT_M = "opt.m"
OPT_V = "opt.v"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    total_steps: int = 1000
    batch_size: int = 16
    grad_clip: float = 1.0
    seed: int = 0
    r_t: float = 0.25
    r_s: float = 1.0 / 3.0
    loss_on: str = "masked"
    checkpoint_every: int = 500
    data_path: str = ""
    out_dir: str = ""

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_on not in ("masked", "all"):
            raise ValueError(f"loss_on must be 'masked' or 'all', got {self.loss_on!r}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState, lr_t: float,
              cfg: TrainConfig, layout: list[tuple[str, int, int]] | None = None
              ) -> tuple[np.ndarray, OptimizerState]:
    """One Adam update with bias correction and decoupled weight decay.

    Raises NonFiniteGradient (naming the offending tensor when a layout is
    supplied) before touching any state.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and optimizer state must have equal lengths")
    if not np.isfinite(grads).all():
        raise NonFiniteGradient(_locate_nonfinite(grads, layout))
    b1, b2 = cfg.betas
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    new_params = params - lr_t * (mhat / (np.sqrt(vhat) + cfg.eps) + cfg.weight_decay * params)
    return new_params, OptimizerState(m=m, v=v, step=t)


def _locate_nonfinite(vec: np.ndarray, layout: list[tuple[str, int, int]] | None) -> str:
    bad = int(np.flatnonzero(~np.isfinite(vec))[0])
    if layout:
        for name, start, stop in layout:
            if start <= bad < stop:
                return f"non-finite gradient in tensor {name!r} (flat index {bad})"
    return f"non-finite gradient at flat index {bad}"


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> lr, then cosine decay to lr/100 at total_steps."""
    lr_min = cfg.lr / 100.0
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return lr_min
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return lr_min
    progress = (step - cfg.warmup_steps) / span
    return lr_min + (cfg.lr - lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: np.ndarray, bound: float) -> tuple[np.ndarray, float]:
    """Scale the flat gradient so its global L2 norm is at most ``bound``."""
    norm = float(np.sqrt(np.sum(grads.astype(np.float64) ** 2)))
    if bound > 0 and norm > bound:
        grads = grads * (bound / norm)
    return grads, norm


@dataclass(frozen=True)
class TrainResult:
    final_checkpoint: str
    metrics_path: str
    steps_run: int
    checkpoints: list[str] = field(default_factory=list)


def _mask_seed(run_seed: int, bout_id: str, epoch: int) -> int:
    return derive_seed(run_seed, "mask", bout_id, epoch)


def _save(path: str, cfg: TrainConfig, model_cfg: ModelConfig, params: ModelParams,
          state: OptimizerState, step: int) -> None:
    tensors = params.checkpoint_tensors()
    tensors.append((OPT_M, state.m.astype(np.float32)))
    tensors.append((OPT_V, state.v.astype(np.float32)))
    config = {"train": cfg.to_dict(), "model": model_cfg.to_dict()}
    dataio.save_checkpoint(path, config, cfg.seed, step, tensors)


def load_model_from_checkpoint(path, dtype: torch.dtype = torch.float32
                               ) -> tuple[ModelParams, ModelConfig, dataio.CheckpointManifest, dict]:
    """Rebuild ModelParams (and raw tensors) from a checkpoint file."""
    manifest, tensors = dataio.load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(manifest.config["model"])
    params = ModelParams.from_arrays(model_cfg, tensors, dtype=dtype)
    return params, model_cfg, manifest, tensors


def train(cfg: TrainConfig, model_cfg: ModelConfig, resume: str | None = None,
          threads: int = 1) -> TrainResult:
    """Run the training loop; see module docstring for determinism notes.

    When ``resume`` is given, model tensors, optimizer moments, and the
    step counter come from the checkpoint and the loop continues to
    ``total_steps`` of the checkpointed config.
    """
    torch.set_num_threads(max(1, threads))
    bouts = dataio.read_bouts(cfg.data_path)
    if not bouts:
        raise ValueError(f"no bouts in {cfg.data_path}")
    if any(b.J != model_cfg.J for b in bouts):
        bad = next(b for b in bouts if b.J != model_cfg.J)
        raise ValueError(f"bout {bad.bout_id!r} has J={bad.J}, model expects J={model_cfg.J}")

    start_step = 0
    if resume is not None:
        params, model_cfg, manifest, raw = load_model_from_checkpoint(resume)
        cfg = TrainConfig.from_dict({**manifest.config["train"],
                                     "data_path": cfg.data_path, "out_dir": cfg.out_dir})
        start_step = manifest.step
        n = params.n_params
        m = raw.get(OPT_M, np.zeros(n, dtype=np.float32)).astype(np.float32)
        v = raw.get(OPT_V, np.zeros(n, dtype=np.float32)).astype(np.float32)
        state = OptimizerState(m=m, v=v, step=start_step)
    else:
        params = ModelParams.init(model_cfg, cfg.seed)
        n = params.n_params
        state = OptimizerState(m=np.zeros(n, dtype=np.float32), v=np.zeros(n, dtype=np.float32))

    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    layout = params.layout()
    flat = params.to_flat()
    steps_per_epoch = max(1, math.ceil(len(bouts) / cfg.batch_size))
    checkpoints: list[str] = []

    # bouts are padded once so every length is a multiple of F
    padded = [pad_to_slice_multiple(b, model_cfg.F) for b in bouts]

    with open(metrics_path, "w", encoding="utf-8") as metrics:
        for step in range(start_step, cfg.total_steps):
            t0 = time.perf_counter()
            epoch, slot = divmod(step, steps_per_epoch)
            batches = dataio.make_batches(len(padded), cfg.batch_size, cfg.seed, epoch)
            batch = [padded[i] for i in batches[slot]]
            plans = [
                plan_mask(b.T, b.J, model_cfg.F, cfg.r_t, cfg.r_s,
                          _mask_seed(cfg.seed, b.bout_id, epoch))
                for b in batch
            ]
            try:
                loss, grads = forward_backward(batch, plans, params, model_cfg, loss_on=cfg.loss_on)
            except NonFiniteGradient as e:
                raise NonFiniteGradient(f"step {step}: {e}") from e
            if not math.isfinite(loss):
                raise NonFiniteGradient(f"step {step}: loss is non-finite")
            grads, _ = clip_global_norm(grads, cfg.grad_clip)
            lr_t = lr_at(step, cfg)
            try:
                flat, state = adam_step(flat, grads, state, lr_t, cfg, layout=layout)
            except NonFiniteGradient as e:
                raise NonFiniteGradient(f"step {step}: {e}") from e
            params.from_flat(flat)
            wall_ms = (time.perf_counter() - t0) * 1e3
            metrics.write(json.dumps({"step": step, "loss": loss, "lr": lr_t, "wall_ms": wall_ms}) + "\n")
            if (step + 1) % cfg.checkpoint_every == 0 and (step + 1) < cfg.total_steps:
                path = os.path.join(cfg.out_dir, f"ckpt-step{step + 1:06d}.msae")
                _save(path, cfg, model_cfg, params, state, step + 1)
                checkpoints.append(path)

    final_path = os.path.join(cfg.out_dir, "ckpt-final.msae")
    _save(final_path, cfg, model_cfg, params, state, cfg.total_steps)
    checkpoints.append(final_path)
    return TrainResult(
        final_checkpoint=final_path,
        metrics_path=metrics_path,
        steps_run=cfg.total_steps - start_step,
        checkpoints=checkpoints,
    )
