"""Toy latent video denoiser.

A three-level UNet over (B, N, C, H, W) videos. Every level carries
pseudo-3D residual blocks (per-frame 2D conv + depthwise temporal conv),
spatial cross-attention to the per-frame conditioning row, and temporal
self-attention along the frame axis. Level ids are the spatial
resolutions (16, 8, 4 by default); the largest is the ``"top"`` level.

Frames only exchange information through the temporal convolutions and
the temporal attention layers.
"""

from __future__ import annotations

import dataclasses
import math
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from vstar.temporal_attention import (
    NO_HOOK,
    PE_VARIANTS,
    AttentionHook,
    attention_torch,
    sinusoidal_table_torch,
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 64)
    heads: int = 2
    cond_dim: int = 32
    cond_tokens: int = 4
    token_dim: int = 16
    vocab_size: int = 64
    time_dim: int = 64
    n_train: int = 16
    pe: str = "none"
    temporal_conv: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.pe not in PE_VARIANTS:
            raise ValueError(f"unknown positional encoding {self.pe!r}")
        if self.cond_dim % self.cond_tokens:
            raise ValueError("cond_dim must be divisible by cond_tokens")
        if self.image_size % 2 ** (len(self.channels) - 1):
            raise ValueError("image_size must be divisible by 2**(levels-1)")
        for c in self.channels:
            if c % self.heads or c % 8:
                raise ValueError("channels must be divisible by heads and by 8")

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(self.image_size // 2**i for i in range(len(self.channels)))

    @property
    def top_level(self) -> int:
        return self.levels[0]

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


class HookState:
    """Per-forward hook routing and capture buffer.

    Captured maps are stored as float64 numpy arrays, or as live torch
    tensors when ``keep_tensors`` is set (for differentiating through them).
    """

    def __init__(self, hooks, top_level, keep_tensors: bool = False):
        self.keep_tensors = keep_tensors
        self.by_level: dict = {}
        for hook in hooks:
            h = hook.resolved(top_level)
            for lv in h.levels:
                if lv in self.by_level:
                    raise ValueError(f"more than one hook targets level {lv}")
                self.by_level[lv] = h
        self.captures: dict = defaultdict(list)

    def hook_for(self, level) -> AttentionHook:
        return self.by_level.get(level, NO_HOOK)

    def record(self, level, m: torch.Tensor) -> None:
        self.captures[level].append(m if self.keep_tensors else m.detach().to(torch.float64).numpy())

    def averaged(self) -> dict:
        if self.keep_tensors:
            return {lv: torch.stack(ms).mean(dim=0) for lv, ms in self.captures.items()}
        return {lv: np.mean(ms, axis=0) for lv, ms in self.captures.items()}


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class TextEncoder(nn.Module):
    """Mean of token embeddings followed by one affine map."""

    def __init__(self, vocab_size, token_dim, cond_dim):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, token_dim)
        self.proj = nn.Linear(token_dim, cond_dim)
        nn.init.normal_(self.embedding.weight, std=1.0)

    def forward(self, ids: list[list[int]]) -> torch.Tensor:
        rows = [self.embedding(torch.as_tensor(i, dtype=torch.long)).mean(dim=0) for i in ids]
        return self.proj(torch.stack(rows))


class TemporalConv(nn.Module):
    """Depthwise width-3 convolution along frames, initialised to identity."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, 3, padding=1, groups=channels, padding_mode="replicate")
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[:, 0, 1] = 1.0
            self.conv.bias.zero_()

    def forward(self, x, n):
        bn, c, h, w = x.shape
        b = bn // n
        y = x.reshape(b, n, c, h * w).permute(0, 3, 2, 1).reshape(b * h * w, c, n)
        y = self.conv(y)
        return y.reshape(b, h * w, c, n).permute(0, 3, 2, 1).reshape(bn, c, h, w)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, time_dim, temporal_conv):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.tconv = TemporalConv(cout) if temporal_conv else None
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb, n):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        if self.tconv is not None:
            h = self.tconv(h, n)
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Spatial tokens of each frame attend to that frame's conditioning tokens."""

    def __init__(self, channels, token_dim, heads):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(token_dim, channels, bias=False)
        self.v = nn.Linear(token_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, ctx):
        # x: (BN, c, h, w); ctx: (BN, tokens, token_dim)
        bn, c, h, w = x.shape
        hs = self.norm(x).reshape(bn, c, h * w).transpose(1, 2)
        dh = c // self.heads
        q = self.q(hs).reshape(bn, h * w, self.heads, dh).transpose(1, 2)
        k = self.k(ctx).reshape(bn, -1, self.heads, dh).transpose(1, 2)
        v = self.v(ctx).reshape(bn, -1, self.heads, dh).transpose(1, 2)
        a = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        o = (a @ v).transpose(1, 2).reshape(bn, h * w, c)
        return x + self.out(o).transpose(1, 2).reshape(bn, c, h, w)


class TemporalAttention(nn.Module):
    """Self-attention over frames with spatial positions merged into the batch."""

    def __init__(self, channels, heads, level, pe):
        super().__init__()
        self.heads = heads
        self.level = level
        self.pe = pe
        self.norm = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, n, state: HookState | None):
        bn, c, h, w = x.shape
        b = bn // n
        # (B*N, c, h, w) -> (B*h*w, N, c)
        seq = x.reshape(b, n, c, h * w).permute(0, 3, 1, 2).reshape(b * h * w, n, c)
        hs = self.norm(seq)
        q, k, v = self.q(hs), self.k(hs), self.v(hs)
        if self.pe == "absolute_sinusoidal":
            pe = sinusoidal_table_torch(n, c, q.dtype)
            q, k = q + pe, k + pe
        hook = state.hook_for(self.level) if state is not None else NO_HOOK
        o, captured = attention_torch(q, k, v, self.heads, hook, self.pe)
        if captured is not None:
            state.record(self.level, captured)
        o = self.out(o).reshape(b, h * w, n, c).permute(0, 2, 3, 1).reshape(bn, c, h, w)
        return x + o


class Level(nn.Module):
    def __init__(self, cin, cout, cfg: ModelConfig, level):
        super().__init__()
        self.res = ResBlock(cin, cout, cfg.time_dim, cfg.temporal_conv)
        self.cross = CrossAttention(cout, cfg.token_dim, cfg.heads)
        self.temporal = TemporalAttention(cout, cfg.heads, level, cfg.pe)

    def forward(self, x, temb, ctx, n, state):
        x = self.res(x, temb, n)
        x = self.cross(x, ctx)
        return self.temporal(x, n, state)


class VideoDenoiser(nn.Module):
    """Predicts the added noise for a batch of noised videos."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        lv = cfg.levels
        self.text = TextEncoder(cfg.vocab_size, cfg.token_dim, cfg.cond_dim)
        self.ctx_proj = nn.Linear(cfg.cond_dim, cfg.cond_tokens * cfg.token_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        self.inp = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            if i > 0:
                self.downsample.append(nn.Conv2d(prev, c, 3, stride=2, padding=1))
                prev = c
            self.down.append(Level(prev, c, cfg, lv[i]))
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in range(len(ch) - 2, -1, -1):
            self.upsample.append(nn.Conv2d(ch[i + 1], ch[i], 3, padding=1))
            self.up.append(Level(2 * ch[i], ch[i], cfg, lv[i]))
        self.out_norm = nn.GroupNorm(8, ch[0])
        self.out = nn.Conv2d(ch[0], cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def temporal_layers(self):
        return [m for m in self.modules() if isinstance(m, TemporalAttention)]

    def encode_prompts(self, ids: list[list[int]]) -> torch.Tensor:
        return self.text(ids)

    def forward(self, x, t, cond, state: HookState | None = None):
        """x: (B, N, C, H, W); t: (B,); cond: (B, N, cond_dim)."""
        b, n, c, h, w = x.shape
        dtype = x.dtype
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(dtype))
        temb = temb.repeat_interleave(n, dim=0)
        ctx = self.ctx_proj(cond.reshape(b * n, -1)).reshape(b * n, self.cfg.cond_tokens, self.cfg.token_dim)
        hcur = self.inp(x.reshape(b * n, c, h, w))
        skips = []
        for i, level in enumerate(self.down):
            if i > 0:
                hcur = self.downsample[i - 1](hcur)
            hcur = level(hcur, temb, ctx, n, state)
            skips.append(hcur)
        skips.pop()
        for up, level in zip(self.upsample, self.up):
            hcur = up(F.interpolate(hcur, scale_factor=2.0, mode="nearest"))
            hcur = level(torch.cat([hcur, skips.pop()], dim=1), temb, ctx, n, state)
        out = self.out(F.silu(self.out_norm(hcur)))
        return out.reshape(b, n, c, h, w)


@contextmanager
def deterministic_torch(threads: int = 1):
    prev = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        yield
    finally:
        torch.set_num_threads(prev)
