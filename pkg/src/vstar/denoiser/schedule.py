from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vstar.tensor_core import SeededRng


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule with its cumulative alpha products."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return t

    def ddim_timesteps(self, steps: int) -> list[int]:
        """Descending, evenly spaced timesteps ending at 0."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        ts = np.round(np.linspace(0, self.T - 1, steps)).astype(int)
        return sorted(set(int(t) for t in ts), reverse=True)

    def to_json(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def add_noise(clean, t: int, schedule: DiffusionSchedule, rng: SeededRng | None = None, noise=None):
    """Sample ``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps``.

    Returns ``(x_t, eps)``. Pass ``noise`` to reuse a fixed ``eps``.
    """
    t = schedule.check_t(t)
    x0 = np.asarray(clean, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit noise")
        noise = rng.normal(x0.shape)
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise, noise
