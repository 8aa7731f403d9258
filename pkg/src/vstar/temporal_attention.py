"""Temporal self-attention over the frame axis, with hook points.

Inputs are laid out as ``(S, N, d)``: ``S`` spatial positions (merged into
the batch axis), ``N`` frames, ``d`` channels. Two implementations share
the same semantics:

* :func:`temporal_self_attention` - float64 numpy, backed by :mod:`vstar.kernels`;
  the reference path used in tests and analysis.
* :func:`attention_torch` - differentiable torch path used inside the denoiser.

Hook semantics:

``regularize``  logits + max(logits) * delta, per (position, head) map, before softmax
``replace``     the post-softmax map is substituted by a row-stochastic matrix
``capture``     the map (after regularization/replacement) is averaged over
                heads and positions and returned
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch

from vstar import kernels
from vstar.regularizer import RegularizerMatrix, build_gaussian_toeplitz, extreme_matrix

PEVariant = Literal["none", "absolute_sinusoidal", "rotary_relative"]
PE_VARIANTS = ("none", "absolute_sinusoidal", "rotary_relative")
HookMode = Literal["none", "capture", "regularize", "replace"]


@dataclass(frozen=True)
class TemporalAttentionMap:
    level: int | None
    values: np.ndarray = field(repr=False)
    timestep: int | None = None
    head: int | None = None  # None: averaged over heads

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class AttentionHook:
    """What to do with the temporal attention at a set of levels.

    ``levels`` holds level ids or the alias ``"top"``. For ``regularize``
    supply ``sigma`` (a Gaussian-Toeplitz matrix is built for whatever
    frame count is seen) or a fixed ``matrix``. For ``replace`` supply
    ``kind`` (``identity`` / ``uniform``) or a row-stochastic ``matrix``.
    ``capture`` can be combined with any mode.
    """

    mode: HookMode = "none"
    levels: frozenset = frozenset()
    sigma: float | None = None
    kind: str | None = None
    matrix: RegularizerMatrix | None = None
    capture: bool = False

    def __post_init__(self):
        if self.mode not in ("none", "capture", "regularize", "replace"):
            raise ValueError(f"unknown hook mode {self.mode!r}")
        object.__setattr__(self, "levels", frozenset(self.levels))
        if self.mode == "capture":
            object.__setattr__(self, "capture", True)
        if self.mode == "regularize" and self.sigma is None and self.matrix is None:
            raise ValueError("regularize hook needs sigma or matrix")
        if self.mode == "replace":
            if self.kind is None and self.matrix is None:
                raise ValueError("replace hook needs kind or matrix")
            if self.matrix is not None and not self.matrix.is_row_stochastic(1e-6):
                raise ValueError("replace matrix must be row-stochastic")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def regularize(cls, sigma: float, levels=("top",), capture: bool = False) -> "AttentionHook":
        return cls("regularize", frozenset(levels), sigma=float(sigma), capture=capture)

    @classmethod
    def replace(cls, kind: str, levels=("top",), capture: bool = False) -> "AttentionHook":
        return cls("replace", frozenset(levels), kind=kind, capture=capture)

    @classmethod
    def capture_at(cls, levels) -> "AttentionHook":
        return cls("capture", frozenset(levels))

    def matrix_for(self, n: int) -> np.ndarray | None:
        if self.mode == "regularize":
            if self.matrix is not None:
                return _checked(self.matrix, n).values
            return build_gaussian_toeplitz(n, self.sigma).values
        if self.mode == "replace":
            if self.matrix is not None:
                return _checked(self.matrix, n).values
            return extreme_matrix(n, self.kind).values
        return None

    def resolved(self, top_level) -> "AttentionHook":
        """Copy with the ``"top"`` alias replaced by a concrete level id."""
        levels = frozenset(top_level if lv == "top" else lv for lv in self.levels)
        return AttentionHook(self.mode, levels, self.sigma, self.kind, self.matrix, self.capture)


NO_HOOK = AttentionHook()


def _checked(m: RegularizerMatrix, n: int) -> RegularizerMatrix:
    if m.n != n:
        raise ValueError(f"hook matrix is {m.n}x{m.n} but attention spans {n} frames")
    return m


# ---------------------------------------------------------------------------
# Positional encodings (numpy)
# ---------------------------------------------------------------------------


def sinusoidal_table(positions, d: int) -> np.ndarray:
    """``pe[p, 2i] = sin(p / 10000**(2i/d))``, ``pe[p, 2i+1] = cos(...)``."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(d)
    freq = 1.0 / 10000.0 ** ((i - i % 2) / d)
    ang = pos * freq[None, :]
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def _rotate(x, positions):
    dh = x.shape[-1]
    theta = 1.0 / 10000.0 ** (np.arange(0, dh, 2) / dh)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * theta[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def _check_indices(frame_indices, n):
    idx = np.arange(n) if frame_indices is None else np.asarray(frame_indices)
    if idx.shape != (n,):
        raise ValueError(f"need {n} frame indices, got {idx.shape}")
    if n > 1 and np.any(np.diff(idx) <= 0):
        raise ValueError("frame indices must be strictly increasing")
    return idx


def apply_positional_encoding(q, k, frame_indices=None, variant: PEVariant = "none", heads: int = 1):
    """Encode frame positions into queries and keys of shape (S, N, d).

    Rotary encoding rotates each head's channel pairs; ``d / heads`` must be even.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if variant not in PE_VARIANTS:
        raise ValueError(f"unknown positional encoding {variant!r}")
    if variant == "none":
        return q, k
    n, d = q.shape[1], q.shape[2]
    idx = _check_indices(frame_indices, n)
    if variant == "absolute_sinusoidal":
        pe = sinusoidal_table(idx, d)
        return q + pe, k + pe
    dh = d // heads
    if dh % 2:
        raise ValueError(f"rotary encoding needs an even per-head dimension, got {dh}")
    s = q.shape[0]
    qh = q.reshape(s, n, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(s, n, heads, dh).transpose(0, 2, 1, 3)
    qr = _rotate(qh, idx).transpose(0, 2, 1, 3).reshape(s, n, d)
    kr = _rotate(kh, idx).transpose(0, 2, 1, 3).reshape(s, n, d)
    return qr, kr


# ---------------------------------------------------------------------------
# numpy attention
# ---------------------------------------------------------------------------


def temporal_self_attention(
    q,
    k,
    v,
    hook: AttentionHook = NO_HOOK,
    pe: PEVariant = "none",
    heads: int = 1,
    level=None,
    timestep=None,
    frame_indices=None,
):
    """Multi-head temporal attention on (S, N, d) blocks.

    Returns ``(output, captured)`` where ``captured`` is a list holding one
    head- and position-averaged :class:`TemporalAttentionMap` if the hook
    requests capture, else empty. The hook is applied regardless of
    ``level``; level filtering is the caller's job.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"q, k, v must share an (S, N, d) shape, got {q.shape}, {k.shape}, {v.shape}")
    s, n, d = q.shape
    if n < 1 or d < 1:
        raise ValueError("need at least one frame and one channel")
    if d % heads:
        raise ValueError(f"d={d} is not divisible by heads={heads}")
    dh = d // heads
    q, k = apply_positional_encoding(q, k, frame_indices, pe, heads)

    def split(x):
        return x.reshape(s, n, heads, dh).transpose(0, 2, 1, 3)

    mat = hook.matrix_for(n)
    if hook.mode == "replace":
        probs = np.broadcast_to(mat, (s, heads, n, n))
    else:
        probs = kernels.attention_probs(split(q), split(k), mat if hook.mode == "regularize" else None)
    out = kernels.attention_apply(probs, split(v)).transpose(0, 2, 1, 3).reshape(s, n, d)
    captured = []
    if hook.capture:
        captured.append(TemporalAttentionMap(level, probs.mean(axis=(0, 1)), timestep))
    return out, captured


# ---------------------------------------------------------------------------
# torch attention
# ---------------------------------------------------------------------------


def sinusoidal_table_torch(n: int, d: int, dtype, offset: int = 0) -> torch.Tensor:
    return torch.as_tensor(sinusoidal_table(np.arange(offset, offset + n), d), dtype=dtype)


def rotate_torch(x: torch.Tensor, positions: np.ndarray) -> torch.Tensor:
    """Rotary encoding on the last axis of an (..., N, dh) tensor."""
    dh = x.shape[-1]
    theta = 1.0 / 10000.0 ** (np.arange(0, dh, 2) / dh)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * theta[None, :]
    cos = torch.as_tensor(np.cos(ang), dtype=x.dtype)
    sin = torch.as_tensor(np.sin(ang), dtype=x.dtype)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    return torch.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), dim=-1).flatten(-2)


def attention_torch(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    hook: AttentionHook = NO_HOOK,
    pe: PEVariant = "none",
):
    """Torch twin of :func:`temporal_self_attention` for (S, N, d) tensors.

    Sinusoidal encodings are expected to be added by the caller (they act
    on the pre-projection features); rotary is applied here. Returns
    ``(output, captured_or_None)``; the captured map is the head and
    position mean of the attention as a (still differentiable) tensor.
    """
    s, n, d = q.shape
    dh = d // heads

    def split(x):
        return x.reshape(s, n, heads, dh).transpose(1, 2)

    qh, kh, vh = split(q), split(k), split(v)
    if pe == "rotary_relative":
        pos = np.arange(n)
        qh, kh = rotate_torch(qh, pos), rotate_torch(kh, pos)
    mat = hook.matrix_for(n)
    if hook.mode == "replace":
        probs = torch.tensor(mat, dtype=q.dtype).expand(s, heads, n, n)
    else:
        logits = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
        if hook.mode == "regularize":
            m = logits.amax(dim=(-2, -1), keepdim=True)
            logits = logits + m * torch.tensor(mat, dtype=q.dtype)
        probs = torch.softmax(logits, dim=-1)
    out = (probs @ vh).transpose(1, 2).reshape(s, n, d)
    captured = None
    if hook.capture:
        captured = probs.mean(dim=(0, 1))
    return out, captured
