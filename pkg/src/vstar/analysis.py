"""Attention and video forensics: band structure, frame similarity, dynamics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from vstar import kernels
from vstar.temporal_attention import TemporalAttentionMap

log = logging.getLogger(__name__)

FEATURE_MODES = ("pixel_cosine", "random_projection_cosine")
PROJECTION_DIM = 64
PROJECTION_SEED = 20240321
DEFAULT_INTERVALS = (1, 2, 4, 8, 16)


def _values(a) -> np.ndarray:
    v = a.values if isinstance(a, TemporalAttentionMap) else a
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ValueError(f"attention map must be square, got {v.shape}")
    return v


def band_energy_ratio(a, k: int) -> float:
    """Share of attention mass with ``|i - j| <= k``."""
    v = _values(a)
    n = v.shape[0]
    if not 0 <= k < n:
        raise ValueError(f"bandwidth k={k} outside [0, {n})")
    return kernels.band_energy(v, k)


def band_profile(a) -> np.ndarray:
    """Mean attention entry at each offset ``|i - j|`` = 0 .. N-1."""
    return kernels.band_profile(_values(a))


def _features(video, mode: str) -> np.ndarray:
    v = np.asarray(video, dtype=np.float64)
    flat = v.reshape(v.shape[0], -1)
    if mode == "pixel_cosine":
        return flat
    if mode == "random_projection_cosine":
        rng = np.random.Generator(np.random.Philox(key=PROJECTION_SEED))
        proj = rng.standard_normal((flat.shape[1], PROJECTION_DIM)) / np.sqrt(PROJECTION_DIM)
        return flat @ proj
    raise ValueError(f"unknown feature mode {mode!r}; choose from {FEATURE_MODES}")


def similarity_matrix(video, feature_mode: str = "pixel_cosine") -> np.ndarray:
    """Cosine similarity between frame features, symmetric with unit diagonal.

    Zero-norm frames get similarity 0 to every other frame.
    """
    v = np.asarray(video, dtype=np.float64)
    if v.ndim < 2 or v.shape[0] < 1:
        raise ValueError("video needs at least one frame")
    feats = _features(v, feature_mode)
    zero = np.flatnonzero(np.linalg.norm(feats, axis=1) == 0)
    if zero.size:
        log.warning("frames %s have zero norm; their similarities are set to 0", zero.tolist())
    return kernels.cosine_similarity(feats)


@dataclass
class IntervalHistogram:
    interval: int
    edges: np.ndarray
    counts: np.ndarray
    mean: float

    def rows(self):
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            yield self.interval, lo, hi, int(c)


def interval_similarity_histogram(videos, intervals=DEFAULT_INTERVALS, bins: int = 20,
                                  feature_mode: str = "pixel_cosine") -> dict[int, IntervalHistogram]:
    """Histogram of frame-pair similarity at each frame offset.

    Bin edges are uniform on [-1, 1]; the last bin is closed.
    """
    videos = list(videos)
    if not videos:
        raise ValueError("need at least one video")
    min_len = min(np.asarray(v).shape[0] for v in videos)
    for d in intervals:
        if not 0 < d < min_len:
            raise ValueError(f"interval {d} must lie in (0, {min_len})")
    sims = [similarity_matrix(v, feature_mode) for v in videos]
    edges = np.linspace(-1.0, 1.0, bins + 1)
    out = {}
    for d in intervals:
        vals = np.concatenate([np.diagonal(s, d) for s in sims])
        counts, _ = np.histogram(np.clip(vals, -1.0, 1.0), bins=edges)
        out[d] = IntervalHistogram(d, edges, counts, float(vals.mean()))
    return out


def dynamics_score(video) -> float:
    """Mean over consecutive frame pairs of the RMS frame difference."""
    v = np.asarray(video, dtype=np.float64)
    if v.shape[0] < 2:
        raise ValueError("dynamics needs at least two frames")
    diff = np.diff(v.reshape(v.shape[0], -1), axis=0)
    return float(np.mean(np.sqrt(np.mean(diff**2, axis=1))))


def joint_minmax(matrices) -> tuple[float, float]:
    """Shared display range for a set of matrices compared side by side."""
    lo = min(float(np.min(m)) for m in matrices)
    hi = max(float(np.max(m)) for m in matrices)
    return lo, hi


def attention_metrics(a, ks=(1, 2)) -> dict:
    v = _values(a)
    out = {f"band_energy_k{k}": band_energy_ratio(v, k) for k in ks if k < v.shape[0]}
    out["diag_mass"] = float(np.trace(v) / v.shape[0])
    return out
