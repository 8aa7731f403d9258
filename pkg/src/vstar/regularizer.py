"""Regularization matrices for temporal attention.

A :class:`RegularizerMatrix` is added to the temporal attention logits
after scaling by the per-map logit maximum (``regularize``), or substitutes
the post-softmax map outright (``identity`` / ``uniform``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np

from vstar import kernels

log = logging.getLogger(__name__)

Kind = Literal["gaussian_toeplitz", "reference", "identity", "uniform"]
KINDS = ("gaussian_toeplitz", "reference", "identity", "uniform")


@dataclass(frozen=True)
class RegularizerMatrix:
    kind: Kind
    values: np.ndarray = field(repr=False)
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"regularizer must be square, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def is_row_stochastic(self, tol: float = 1e-9) -> bool:
        v = self.values
        return bool(np.all(v >= 0) and np.allclose(v.sum(axis=1), 1.0, atol=tol, rtol=0))


@dataclass(frozen=True)
class RegularizerConfig:
    """Per-level sigma; levels absent from the map are left untouched."""

    per_level_sigma: Mapping[int | str, float]

    def __post_init__(self):
        for level, s in self.per_level_sigma.items():
            if not s > 0:
                raise ValueError(f"sigma for level {level} must be positive, got {s}")

    @property
    def apply_levels(self) -> set:
        return set(self.per_level_sigma)

    @classmethod
    def default(cls) -> "RegularizerConfig":
        return cls({"top": 1.0})


def build_gaussian_toeplitz(n: int, sigma: float) -> RegularizerMatrix:
    """Symmetric Toeplitz matrix with entries ``exp(-((j - i) / sigma)**2 / 2)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return RegularizerMatrix("gaussian_toeplitz", kernels.gaussian_toeplitz(n, sigma), float(sigma))


def regularize_logits(logits, delta: RegularizerMatrix | np.ndarray) -> np.ndarray:
    """Return ``logits + max(logits) * delta`` for a single N x N logit map."""
    logits = np.asarray(logits, dtype=np.float64)
    d = delta.values if isinstance(delta, RegularizerMatrix) else np.asarray(delta, dtype=np.float64)
    if logits.ndim != 2 or logits.shape != d.shape:
        raise ValueError(f"logits {logits.shape} and delta {d.shape} do not match")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite entries")
    m = logits.max()
    if m <= 0:
        log.warning("max logit %.4g is not positive; the added term anti-regularizes", m)
    return logits + m * d


def build_reference_delta(similarity, sym_tol: float = 1e-6) -> RegularizerMatrix:
    """Turn a frame-similarity matrix into a regularizer.

    The input is symmetrized, then mapped affinely so the smallest entry
    becomes 0 and the mean diagonal becomes 1. Off-diagonal entries that
    end up above 1 are clipped.
    """
    s = np.asarray(similarity, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"similarity must be square, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("similarity contains non-finite entries")
    if np.max(np.abs(s - s.T), initial=0.0) > sym_tol:
        raise ValueError("similarity matrix is not symmetric")
    sym = 0.5 * (s + s.T)
    lo = sym.min()
    top = np.diagonal(sym).mean()
    if sym.max() - lo <= 0 or top - lo <= 0:
        raise ValueError("similarity matrix has no contrast (max == min)")
    out = np.clip((sym - lo) / (top - lo), 0.0, 1.0)
    np.fill_diagonal(out, 1.0)
    return RegularizerMatrix("reference", out)


def extreme_matrix(n: int, kind: Literal["identity", "uniform"]) -> RegularizerMatrix:
    """Row-stochastic replacement maps: ``I_N`` or ``J_N / N``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if kind == "identity":
        return RegularizerMatrix("identity", np.eye(n))
    if kind == "uniform":
        return RegularizerMatrix("uniform", np.full((n, n), 1.0 / n))
    raise ValueError(f"extreme kind must be 'identity' or 'uniform', got {kind!r}")
