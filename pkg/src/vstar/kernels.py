"""Hot numeric kernels.

Each kernel has a vectorized numpy implementation and an explicit-loop
numba implementation. The numba path is used when numba imports and
``VSTAR_DISABLE_NUMBA`` is unset (or ``0``). Both paths are importable
directly for cross-checking and benchmarking: ``kernels.numpy_impl.<name>``
and ``kernels.numba_impl.<name>``.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

_DISABLED = os.environ.get("VSTAR_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is an install-time dependency
    nb = None

NUMBA_AVAILABLE = nb is not None
USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _np_softmax_rows(m):
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _np_gaussian_toeplitz(n, sigma):
    off = np.arange(n, dtype=np.float64)
    d = off[None, :] - off[:, None]
    return np.exp(-0.5 * (d / sigma) ** 2)


def _np_attention_probs(q, k, delta, use_delta):
    # q, k: (S, H, N, dh)
    dh = q.shape[-1]
    logits = np.einsum("shid,shjd->shij", q, k) / math.sqrt(dh)
    if use_delta:
        m = logits.max(axis=(-2, -1), keepdims=True)
        logits = logits + m * delta
    return _np_softmax_rows(logits)


def _np_attention_apply(probs, v):
    return np.einsum("shij,shjd->shid", probs, v)


def _np_cosine_similarity(feats):
    norms = np.sqrt(np.einsum("if,if->i", feats, feats))
    gram = feats @ feats.T
    n = feats.shape[0]
    out = np.zeros((n, n))
    ok = norms > 0
    denom = np.outer(norms, norms)
    mask = np.outer(ok, ok)
    out[mask] = gram[mask] / denom[mask]
    np.fill_diagonal(out, 1.0)
    return 0.5 * (out + out.T)


def _np_band_profile(a):
    n = a.shape[0]
    prof = np.empty(n)
    for off in range(n):
        upper = np.diagonal(a, off)
        if off == 0:
            prof[off] = upper.mean()
        else:
            lower = np.diagonal(a, -off)
            prof[off] = (upper.sum() + lower.sum()) / (2 * (n - off))
    return prof


def _np_band_energy(a, k):
    n = a.shape[0]
    idx = np.arange(n)
    mask = np.abs(idx[:, None] - idx[None, :]) <= k
    return a[mask].sum() / a.sum()


numpy_impl = SimpleNamespace(
    softmax_rows=_np_softmax_rows,
    gaussian_toeplitz=_np_gaussian_toeplitz,
    attention_probs=_np_attention_probs,
    attention_apply=_np_attention_apply,
    cosine_similarity=_np_cosine_similarity,
    band_profile=_np_band_profile,
    band_energy=_np_band_energy,
)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @nb.njit(cache=True)
    def _nb_softmax_rows(m):
        out = np.empty_like(m)
        n, p = m.shape
        for i in range(n):
            mx = m[i, 0]
            for j in range(1, p):
                if m[i, j] > mx:
                    mx = m[i, j]
            s = 0.0
            for j in range(p):
                e = math.exp(m[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(p):
                out[i, j] /= s
        return out

    @nb.njit(cache=True)
    def _nb_gaussian_toeplitz(n, sigma):
        out = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                r = (j - i) / sigma
                out[i, j] = math.exp(-0.5 * r * r)
        return out

    @nb.njit(cache=True)
    def _nb_attention_probs(q, k, delta, use_delta):
        S, H, N, dh = q.shape
        scale = 1.0 / math.sqrt(dh)
        out = np.empty((S, H, N, N))
        for s in range(S):
            for h in range(H):
                logits = np.empty((N, N))
                mx = -np.inf
                for i in range(N):
                    for j in range(N):
                        acc = 0.0
                        for d in range(dh):
                            acc += q[s, h, i, d] * k[s, h, j, d]
                        acc *= scale
                        logits[i, j] = acc
                        if acc > mx:
                            mx = acc
                if use_delta:
                    for i in range(N):
                        for j in range(N):
                            logits[i, j] = logits[i, j] + mx * delta[i, j]
                out[s, h] = _nb_softmax_rows(logits)
        return out

    @nb.njit(cache=True)
    def _nb_attention_apply(probs, v):
        S, H, N, _ = probs.shape
        dh = v.shape[3]
        out = np.empty((S, H, N, dh))
        for s in range(S):
            for h in range(H):
                for i in range(N):
                    for d in range(dh):
                        acc = 0.0
                        for j in range(N):
                            acc += probs[s, h, i, j] * v[s, h, j, d]
                        out[s, h, i, d] = acc
        return out

    @nb.njit(cache=True)
    def _nb_cosine_similarity(feats):
        n, f = feats.shape
        norms = np.empty(n)
        for i in range(n):
            acc = 0.0
            for t in range(f):
                acc += feats[i, t] * feats[i, t]
            norms[i] = math.sqrt(acc)
        out = np.empty((n, n))
        for i in range(n):
            out[i, i] = 1.0
            for j in range(i + 1, n):
                if norms[i] > 0.0 and norms[j] > 0.0:
                    acc = 0.0
                    for t in range(f):
                        acc += feats[i, t] * feats[j, t]
                    v = acc / (norms[i] * norms[j])
                else:
                    v = 0.0
                out[i, j] = v
                out[j, i] = v
        return out

    @nb.njit(cache=True)
    def _nb_band_profile(a):
        n = a.shape[0]
        prof = np.zeros(n)
        for off in range(n):
            acc = 0.0
            cnt = 0
            for i in range(n - off):
                acc += a[i, i + off]
                cnt += 1
                if off > 0:
                    acc += a[i + off, i]
                    cnt += 1
            prof[off] = acc / cnt
        return prof

    @nb.njit(cache=True)
    def _nb_band_energy(a, k):
        n = a.shape[0]
        inside = 0.0
        total = 0.0
        for i in range(n):
            for j in range(n):
                total += a[i, j]
                if abs(i - j) <= k:
                    inside += a[i, j]
        return inside / total

    numba_impl = SimpleNamespace(
        softmax_rows=_nb_softmax_rows,
        gaussian_toeplitz=_nb_gaussian_toeplitz,
        attention_probs=_nb_attention_probs,
        attention_apply=_nb_attention_apply,
        cosine_similarity=_nb_cosine_similarity,
        band_profile=_nb_band_profile,
        band_energy=_nb_band_energy,
    )
else:  # pragma: no cover
    numba_impl = None

_active = numba_impl if USE_NUMBA else numpy_impl


def softmax_rows(m: np.ndarray) -> np.ndarray:
    return _active.softmax_rows(m)


def gaussian_toeplitz(n: int, sigma: float) -> np.ndarray:
    return _active.gaussian_toeplitz(int(n), float(sigma))


def attention_probs(q: np.ndarray, k: np.ndarray, delta: np.ndarray | None) -> np.ndarray:
    """Row-softmaxed temporal attention for (S, H, N, dh) query/key blocks.

    With ``delta`` given, each (S, H) logit map is shifted by its own max
    times ``delta`` before the softmax.
    """
    n = q.shape[2]
    use = delta is not None
    d = np.ascontiguousarray(delta, dtype=np.float64) if use else np.zeros((n, n))
    return _active.attention_probs(
        np.ascontiguousarray(q, dtype=np.float64), np.ascontiguousarray(k, dtype=np.float64), d, use
    )


def attention_apply(probs: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``probs @ v`` per (S, H) block."""
    return _active.attention_apply(
        np.ascontiguousarray(probs, dtype=np.float64), np.ascontiguousarray(v, dtype=np.float64)
    )


def cosine_similarity(feats: np.ndarray) -> np.ndarray:
    return _active.cosine_similarity(np.ascontiguousarray(feats, dtype=np.float64))


def band_profile(a: np.ndarray) -> np.ndarray:
    return _active.band_profile(np.ascontiguousarray(a, dtype=np.float64))


def band_energy(a: np.ndarray, k: int) -> float:
    return float(_active.band_energy(np.ascontiguousarray(a, dtype=np.float64), int(k)))
