"""Deterministic DDIM sampling and attention read-out."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from vstar.denoiser.checkpoint import ModelCheckpoint
from vstar.denoiser.model import HookState, deterministic_torch
from vstar.denoiser.schedule import add_noise
from vstar.temporal_attention import AttentionHook, TemporalAttentionMap
from vstar.tensor_core import SeededRng
from vstar.vsp import FrameConditioningSchedule, build_schedule


@dataclass
class SampleResult:
    video: np.ndarray  # (N, C, H, W)
    dumps: dict = field(default_factory=dict)  # (level, timestep) -> N x N map

    def level_mean(self, level) -> np.ndarray:
        maps = [m for (lv, _), m in self.dumps.items() if lv == level]
        if not maps:
            raise KeyError(f"no captured maps for level {level}")
        return np.mean(maps, axis=0)


def _with_capture(hooks, levels, capture):
    out = []
    covered = set()
    for h in hooks:
        out.append(AttentionHook(h.mode, h.levels, h.sigma, h.kind, h.matrix, h.capture or capture))
        covered |= h.levels
    if capture:
        rest = [lv for lv in levels if lv not in covered]
        if rest:
            out.append(AttentionHook.capture_at(rest))
    return out


def resolve_hooks(ckpt: ModelCheckpoint, hooks, capture: bool = False):
    """Replace the ``"top"`` alias and reject levels the model does not have."""
    levels = ckpt.config.levels
    resolved = [h.resolved(ckpt.config.top_level) for h in hooks]
    for h in resolved:
        bad = [lv for lv in h.levels if lv not in levels]
        if bad:
            raise ValueError(f"hook level(s) {bad} not in model levels {list(levels)}")
    return _with_capture(resolved, levels, capture)


def constant_schedule(ckpt: ModelCheckpoint, prompt: str, n_frames: int) -> FrameConditioningSchedule:
    return build_schedule(ckpt.encode([prompt]), n_frames)


def sample(
    ckpt: ModelCheckpoint,
    schedule: FrameConditioningSchedule,
    hooks=(),
    n_frames: int | None = None,
    steps: int = 50,
    seed: int = 0,
    capture: bool = True,
    init_noise: np.ndarray | None = None,
) -> SampleResult:
    """Generate one video of ``n_frames`` frames in a single pass.

    Initial noise comes from ``SeededRng(seed)`` unless ``init_noise`` is
    given. Hooks apply at every step; with ``capture`` the head/position
    averaged map of every level is kept per timestep.
    """
    n = schedule.n_frames if n_frames is None else int(n_frames)
    if n < 1:
        raise ValueError("n_frames must be >= 1")
    if schedule.n_frames != n:
        raise ValueError(f"schedule has {schedule.n_frames} rows but n_frames={n}")
    cfg = ckpt.config
    hooks = resolve_hooks(ckpt, hooks, capture)
    shape = (n, cfg.in_channels, cfg.image_size, cfg.image_size)
    if init_noise is None:
        init_noise = SeededRng(seed).normal(shape)
    elif init_noise.shape != shape:
        raise ValueError(f"init_noise must have shape {shape}")
    ab = ckpt.schedule.alpha_bars
    ts = ckpt.schedule.ddim_timesteps(steps)
    model = ckpt.model
    dumps = {}
    with torch.no_grad(), deterministic_torch():
        x = torch.as_tensor(init_noise, dtype=torch.float32)[None]
        cond = torch.as_tensor(schedule.embeddings, dtype=torch.float32)[None]
        for i, t in enumerate(ts):
            state = HookState(hooks, cfg.top_level)
            eps = model(x, torch.tensor([t]), cond, state)
            for lv, m in state.averaged().items():
                dumps[(lv, t)] = m
            a_t = float(ab[t])
            a_prev = float(ab[ts[i + 1]]) if i + 1 < len(ts) else 1.0
            x0 = ((x - (1 - a_t) ** 0.5 * eps) / a_t**0.5).clamp(-1.0, 1.0)
            x = a_prev**0.5 * x0 + (1 - a_prev) ** 0.5 * eps
    return SampleResult(x[0].double().numpy(), dumps)


def default_t_set(T: int) -> list[int]:
    return [int(0.2 * T), int(0.5 * T), int(0.8 * T)]


def extract_attention(
    video,
    ckpt: ModelCheckpoint,
    t_set=None,
    rng: SeededRng | None = None,
    prompt: str | None = None,
    hooks=(),
    noise=None,
) -> dict:
    """Temporal attention of a clean video, read out after forward noising.

    For each ``t`` the video is noised with ``rng``, passed once through
    the denoiser with capture on, and the per-level maps are averaged over
    ``t_set``. Returns ``{level: TemporalAttentionMap}``.
    """
    t_set = default_t_set(ckpt.schedule.T) if t_set is None else list(t_set)
    if not t_set:
        raise ValueError("t_set is empty")
    rng = rng or SeededRng(0)
    video = np.asarray(video, dtype=np.float64)
    n = video.shape[0]
    sched = constant_schedule(ckpt, prompt or "<unk>", n)
    hooks = resolve_hooks(ckpt, hooks, capture=True)
    per_level: dict = {}
    with torch.no_grad(), deterministic_torch():
        cond = torch.as_tensor(sched.embeddings, dtype=torch.float32)[None]
        for t in t_set:
            xt, _ = add_noise(video, t, ckpt.schedule, rng, noise)
            state = HookState(hooks, ckpt.config.top_level)
            ckpt.model(torch.as_tensor(xt, dtype=torch.float32)[None], torch.tensor([t]), cond, state)
            for lv, m in state.averaged().items():
                per_level.setdefault(lv, []).append(m)
    return {lv: TemporalAttentionMap(lv, np.mean(ms, axis=0), None) for lv, ms in per_level.items()}
