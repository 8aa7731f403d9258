from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from vstar.denoiser.checkpoint import ModelCheckpoint
from vstar.denoiser.model import ModelConfig, VideoDenoiser, deterministic_torch
from vstar.denoiser.schedule import DiffusionSchedule
from vstar.tensor_core import SeededRng
from vstar.vsp import Vocab, schedule_coefficients, build_schedule

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    p_staged: float = 0.5  # share of samples conditioned on an interpolated stage schedule
    log_every: int = 100


def stage_coefficients(k: int, n: int) -> np.ndarray:
    dummy = build_schedule(np.eye(k), n)
    return schedule_coefficients(dummy, k)


def conditioning_batch(model, vocab, items, staged_flags, n):
    """(B, N, D) conditioning: constant caption or interpolated stages."""
    rows = []
    for item, staged in zip(items, staged_flags):
        if staged and len(item.stages) > 1:
            emb = model.encode_prompts([vocab.ids(s) for s in item.stages])
            coef = torch.as_tensor(stage_coefficients(len(item.stages), n), dtype=emb.dtype)
            rows.append(coef @ emb)
        else:
            emb = model.encode_prompts([vocab.ids(item.caption)])
            rows.append(emb.expand(n, -1))
    return torch.stack(rows)


@dataclass
class Batch:
    items: list
    t: torch.Tensor
    xt: torch.Tensor
    noise: torch.Tensor
    staged: np.ndarray


def draw_batch(rng: SeededRng, dataset, schedule: DiffusionSchedule, batch_size: int, p_staged: float) -> Batch:
    idx = rng.generator.integers(0, len(dataset), batch_size)
    t = rng.generator.integers(0, schedule.T, batch_size)
    staged = rng.uniform(size=batch_size) < p_staged
    x0 = np.stack([dataset[i].video for i in idx])
    noise = rng.normal(x0.shape)
    a = schedule.alpha_bars[t][:, None, None, None, None]
    xt = np.sqrt(a) * x0 + np.sqrt(1 - a) * noise
    return Batch(
        [dataset[i] for i in idx],
        torch.as_tensor(t),
        torch.as_tensor(xt, dtype=torch.float32),
        torch.as_tensor(noise, dtype=torch.float32),
        staged,
    )


def batch_loss(model: VideoDenoiser, vocab: Vocab, batch: Batch) -> torch.Tensor:
    n = batch.xt.shape[1]
    cond = conditioning_batch(model, vocab, batch.items, batch.staged, n)
    return torch.mean((model(batch.xt, batch.t, cond) - batch.noise) ** 2)


def train(dataset, model_config: ModelConfig | None = None, seed: int = 0, cfg: TrainConfig = TrainConfig(),
          schedule: DiffusionSchedule | None = None, on_step=None) -> ModelCheckpoint:
    """Fit the denoiser with the epsilon-prediction MSE objective.

    ``dataset`` is a list of :class:`~vstar.denoiser.data.VideoSample`.
    Deterministic given ``seed`` (single-threaded torch, numpy-sourced noise).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    schedule = schedule or DiffusionSchedule()
    vocab = Vocab.from_texts([d.caption for d in dataset] + [s for d in dataset for s in d.stages])
    n = dataset[0].video.shape[0]
    if any(d.video.shape != dataset[0].video.shape for d in dataset):
        raise ValueError("all training videos must share one shape")
    model_config = replace(model_config or ModelConfig(), vocab_size=len(vocab), n_train=n)

    rng = SeededRng(seed)
    history = []
    with deterministic_torch():
        torch.manual_seed(seed)
        model = VideoDenoiser(model_config)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: _lr_factor(s, cfg.steps))
        model.train()
        for step in range(cfg.steps):
            batch = draw_batch(rng, dataset, schedule, cfg.batch_size, cfg.p_staged)
            loss = batch_loss(model, vocab, batch)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss.item()} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            history.append(float(loss.item()))
            if on_step is not None:
                on_step(step, history[-1])
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                log.info("step %d loss %.5f", step + 1, np.mean(history[-cfg.log_every:]))
    model.eval()
    tail = history[-min(len(history), 100):]
    meta = {
        "seed": seed,
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "p_staged": cfg.p_staged,
        "initial_loss": history[0] if history else None,
        "final_loss": float(np.mean(tail)) if tail else None,
    }
    if history:
        log.info("final training loss %.5f", meta["final_loss"])
    return ModelCheckpoint(model, vocab, schedule, meta)


def _lr_factor(step: int, total: int) -> float:
    warmup = min(1.0, (step + 1) / 50)
    return warmup * 0.5 * (1 + math.cos(math.pi * min(step, total) / max(total, 1)))
