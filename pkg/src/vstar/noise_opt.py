"""Initial-noise optimization against a reference video's temporal attention.

The initial latent is ``mu + L @ eps`` along the frame axis, with
``L L^T = Sigma(beta, gamma)``, ``Sigma[i, i] = beta`` and
``Sigma[i, j] = gamma**|i - j|``. Spatial and channel entries stay
independent. ``(mu, beta, gamma)`` are fitted by backtracking gradient
descent on ``L_attn + lambda * L_KL``; gradients come from torch autograd
through a float64 copy of the denoiser.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from vstar.denoiser.checkpoint import ModelCheckpoint
from vstar.denoiser.model import HookState, deterministic_torch
from vstar.denoiser.sampling import constant_schedule, extract_attention, resolve_hooks
from vstar.temporal_attention import AttentionHook, TemporalAttentionMap
from vstar.tensor_core import NotPositiveDefiniteError, SeededRng, cholesky_factor

log = logging.getLogger(__name__)

BETA_RANGE = (0.1, 10.0)
GAMMA_LIMIT = 0.99


@dataclass(frozen=True)
class NoiseDistributionParams:
    mu: float = 0.0
    beta: float = 1.0
    gamma: float = 0.0

    def __post_init__(self):
        if not abs(self.gamma) < 1:
            raise ValueError(f"|gamma| must be < 1, got {self.gamma}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    def as_vector(self) -> np.ndarray:
        return np.array([self.mu, self.beta, self.gamma])

    @classmethod
    def from_vector(cls, x) -> "NoiseDistributionParams":
        return cls(float(x[0]), float(x[1]), float(x[2]))

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OptConfig:
    lam: float = 0.01
    steps: int = 20
    step_size: float = 0.5
    t_ref: tuple[int, ...] = (200, 500, 800)
    level: int | str = "top"
    min_step: float = 1e-8

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        object.__setattr__(self, "t_ref", tuple(sorted({int(t) for t in self.t_ref}, reverse=True)))
        if not self.t_ref:
            raise ValueError("t_ref must name at least one timestep")


def build_covariance(beta: float, gamma: float, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.arange(n)
    off = np.abs(idx[:, None] - idx[None, :])
    sigma = np.power(float(gamma), off.astype(np.float64))
    np.fill_diagonal(sigma, beta)
    return sigma


def kl_to_standard(mu, sigma) -> float:
    """KL( N(mu, sigma) || N(0, I) ) = (tr S + mu.mu - N - log det S) / 2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (sigma.shape[0],))
    L = cholesky_factor(sigma)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L)))
    return float(max(0.5 * (np.trace(sigma) + mu @ mu - sigma.shape[0] - logdet), 0.0))


def attention_match_loss(a_ref, a) -> float:
    """Frobenius norm of the difference between two attention maps."""
    r = a_ref.values if isinstance(a_ref, TemporalAttentionMap) else np.asarray(a_ref, dtype=np.float64)
    x = a.values if isinstance(a, TemporalAttentionMap) else np.asarray(a, dtype=np.float64)
    if r.shape != x.shape:
        raise ValueError(f"attention maps differ in shape: {r.shape} vs {x.shape}")
    if isinstance(a_ref, TemporalAttentionMap) and isinstance(a, TemporalAttentionMap):
        if a_ref.level is not None and a.level is not None and a_ref.level != a.level:
            raise ValueError(f"attention maps come from different levels {a_ref.level} and {a.level}")
    return float(np.sqrt(np.sum((r - x) ** 2)))


# ---------------------------------------------------------------------------
# torch pipeline
# ---------------------------------------------------------------------------


def _covariance_torch(beta, gamma, n):
    idx = torch.arange(n, dtype=torch.float64)
    off = (idx[:, None] - idx[None, :]).abs()
    # exponent clamped to 1 on the diagonal keeps the pow gradient finite at gamma = 0
    powers = gamma ** off.clamp(min=1.0)
    return torch.where(off > 0, powers, beta.expand_as(powers))


def _kl_torch(mu, sigma):
    n = sigma.shape[0]
    L = torch.linalg.cholesky(sigma)
    logdet = 2.0 * torch.log(torch.diagonal(L)).sum()
    return 0.5 * (torch.trace(sigma) + n * mu**2 - n - logdet), L


class NoisePipeline:
    """Deterministic map ``(mu, beta, gamma) -> (L_attn, L_KL)`` for a fixed ``eps``."""

    def __init__(self, ckpt: ModelCheckpoint, reference: dict, cfg: OptConfig, eps: np.ndarray, prompt: str = "<unk>"):
        self.ckpt = ckpt
        self.cfg = cfg
        self.level = ckpt.config.top_level if cfg.level == "top" else int(cfg.level)
        if self.level not in ckpt.config.levels:
            raise ValueError(f"level {cfg.level} not in model levels {ckpt.config.levels}")
        missing = [t for t in cfg.t_ref if t not in reference]
        if missing:
            raise ValueError(f"reference maps missing for timesteps {missing}")
        self.reference = {t: torch.as_tensor(_values(reference[t])) for t in cfg.t_ref}
        self.n = eps.shape[0]
        self.eps = torch.as_tensor(eps, dtype=torch.float64)
        self.model = copy.deepcopy(ckpt.model).double().eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        sched = constant_schedule(ckpt, prompt, self.n)
        self.cond = torch.as_tensor(sched.embeddings, dtype=torch.float64)[None]
        self.hooks = resolve_hooks(ckpt, [AttentionHook.capture_at([self.level])])
        self.ab = ckpt.schedule.alpha_bars
        T = ckpt.schedule.T
        self.timesteps = sorted(set(cfg.t_ref) | {T - 1}, reverse=True)

    def _attention(self, x):
        """DDIM descent from T-1 through the reference timesteps, differentiable."""
        maps = {}
        for i, t in enumerate(self.timesteps):
            state = HookState(self.hooks, self.ckpt.config.top_level, keep_tensors=True)
            eps = self.model(x, torch.tensor([t]), self.cond, state)
            if t in self.reference:
                maps[t] = state.averaged()[self.level]
            if i + 1 < len(self.timesteps):
                a_t, a_n = float(self.ab[t]), float(self.ab[self.timesteps[i + 1]])
                x0 = (x - (1 - a_t) ** 0.5 * eps) / a_t**0.5
                x = a_n**0.5 * x0 + (1 - a_n) ** 0.5 * eps
        return maps

    def losses(self, theta: torch.Tensor):
        mu, beta, gamma = theta[0], theta[1], theta[2]
        sigma = _covariance_torch(beta, gamma, self.n)
        l_kl, L = _kl_torch(mu, sigma)
        noise = mu + torch.einsum("ij,jchw->ichw", L, self.eps)
        maps = self._attention(noise[None])
        l_attn = torch.stack([torch.linalg.norm(self.reference[t] - maps[t]) for t in self.cfg.t_ref]).mean()
        return l_attn, l_kl

    def joint(self, x) -> float:
        with torch.no_grad(), deterministic_torch():
            a, k = self.losses(torch.as_tensor(np.asarray(x, dtype=np.float64)))
        return float(a + self.cfg.lam * k)

    def evaluate(self, x, with_grad: bool = True):
        theta = torch.tensor(np.asarray(x, dtype=np.float64), requires_grad=with_grad)
        with deterministic_torch(), torch.set_grad_enabled(with_grad):
            l_attn, l_kl = self.losses(theta)
            joint = l_attn + self.cfg.lam * l_kl
            grad = None
            if with_grad:
                (grad,) = torch.autograd.grad(joint, theta)
                grad = grad.numpy()
        return float(l_attn.detach()), float(l_kl.detach()), float(joint.detach()), grad

    def gradient(self, x) -> np.ndarray:
        return self.evaluate(x)[3]


def _values(a):
    return a.values if isinstance(a, TemporalAttentionMap) else np.asarray(a, dtype=np.float64)


@dataclass
class OptResult:
    params: NoiseDistributionParams
    initial: NoiseDistributionParams
    trace: list = field(default_factory=list)
    improved: bool = False
    message: str = ""


def reference_attention(video, ckpt: ModelCheckpoint, cfg: OptConfig, seed: int = 0) -> dict:
    """Per-timestep reference maps at ``cfg.level`` from a clean video."""
    level = ckpt.config.top_level if cfg.level == "top" else int(cfg.level)
    out = {}
    for t in cfg.t_ref:
        maps = extract_attention(video, ckpt, [t], SeededRng(seed).split(t))
        out[t] = maps[level].values
    return out


def optimize_initial_noise(reference: dict, ckpt: ModelCheckpoint, cfg: OptConfig = OptConfig(), seed: int = 0,
                           n_frames: int | None = None, init: NoiseDistributionParams = NoiseDistributionParams(),
                           ) -> OptResult:
    """Fit ``(mu, beta, gamma)`` so synthesis attention matches ``reference``.

    ``reference`` maps each timestep in ``cfg.t_ref`` to an N x N map. A step
    is accepted only if the joint loss drops; otherwise (or when the
    covariance is not PSD) the step size is halved.
    """
    n = n_frames or _values(next(iter(reference.values()))).shape[0]
    cfg_shape = (n, ckpt.config.in_channels, ckpt.config.image_size, ckpt.config.image_size)
    eps = SeededRng(seed).normal(cfg_shape)
    pipe = NoisePipeline(ckpt, reference, cfg, eps)
    x = init.as_vector()
    l_attn, l_kl, joint, grad = pipe.evaluate(x, with_grad=cfg.steps > 0)
    trace = [_row(0, l_attn, l_kl, joint, x)]
    result = OptResult(init, init, trace)
    step = cfg.step_size
    for it in range(1, cfg.steps + 1):
        accepted = False
        while step >= cfg.min_step:
            cand = x - step * grad
            cand[1] = np.clip(cand[1], *BETA_RANGE)
            cand[2] = np.clip(cand[2], -GAMMA_LIMIT, GAMMA_LIMIT)
            try:
                cholesky_factor(build_covariance(cand[1], cand[2], n))
            except NotPositiveDefiniteError:
                step *= 0.5
                continue
            c_attn, c_kl, c_joint, _ = pipe.evaluate(cand, with_grad=False)
            if c_joint < joint:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            result.message = f"no descent direction found at iteration {it}"
            log.info(result.message)
            break
        x = cand
        l_attn, l_kl, joint, grad = pipe.evaluate(x)
        trace.append(_row(it, l_attn, l_kl, joint, x))
        step = min(step * 2.0, cfg.step_size)
    result.trace = trace
    if joint < trace[0]["l_joint"]:
        result.params = NoiseDistributionParams.from_vector(x)
        result.improved = True
    elif cfg.steps > 0 and not result.message:
        result.message = "budget exhausted without improvement"
    return result


def _row(step, l_attn, l_kl, joint, x):
    return {"step": step, "l_attn": l_attn, "l_kl": l_kl, "l_joint": joint,
            "beta": float(x[1]), "gamma": float(x[2]), "mu": float(x[0])}


TRACE_HEADER = ("step", "l_attn", "l_kl", "l_joint", "beta", "gamma", "mu")


def sample_noise(params: NoiseDistributionParams, shape, seed: int) -> np.ndarray:
    """Draw an initial latent with frame-axis covariance from ``params``."""
    eps = SeededRng(seed).normal(shape)
    L = cholesky_factor(build_covariance(params.beta, params.gamma, shape[0]))
    return params.mu + np.einsum("ij,j...->i...", L, eps)
