"""Dense numerics shared by every other module.

Internal arithmetic is float64; the on-disk container stores float32.

Container layout (all integers little-endian)::

    b"VSTR" | version (1 byte, 0x01) | header length (uint32) | UTF-8 JSON header
    | prod(shape) * 4 bytes of IEEE-754 float32

with header ``{"dtype": "f32", "shape": [...], "order": "row-major"}``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from vstar import kernels

MAGIC = b"VSTR"
VERSION = 1
_PREFIX = struct.Struct("<4sBI")


class TensorFormatError(ValueError):
    """Base class for malformed tensor containers."""


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class ShapeMismatchError(TensorFormatError):
    pass


class NotSymmetricError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised by :func:`cholesky_factor` when the matrix is not PSD."""


class NonFiniteError(ValueError):
    def __init__(self, message: str, coordinate: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


class SeededRng:
    """Counter-based generator (Philox-4x64) with an explicit seed.

    Streams are single-owner. Parallel or nested work should take a child
    stream from :meth:`split`, never share one instance.

    Test vectors (first three ``next_uint64`` draws)::

        seed 0          -> 0x02f4ba6408e4d89b 0x3dd62b0b9ca8c5b2 0x1c8667a55d902e79
        seed 1          -> 0x4db6a27b756282df 0xd944fa03babe0e2f 0x27f872e577060d32
        seed 0, split 1 -> 0x690f279f4141860c 0xaa9ea8423437c9c0 (first two)
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._bitgen = np.random.Philox(key=self.seed)
        self.generator = np.random.Generator(self._bitgen)

    @property
    def position(self) -> int:
        """Philox block counter (each block holds four 64-bit words)."""
        counter = self._bitgen.state["state"]["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(counter)))

    def split(self, key: int) -> "SeededRng":
        """Child stream derived from ``(seed, key)`` only; independent of position."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        return SeededRng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def next_uint64(self, size: int | None = None):
        """Raw Philox output words."""
        return self._bitgen.random_raw(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def _require_finite(m: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{what} contains non-finite entries")


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax of a finite 2-D matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    _require_finite(m, "softmax input")
    return kernels.softmax_rows(np.ascontiguousarray(m))


def cholesky_factor(m, sym_tol: float = 1e-10) -> np.ndarray:
    """Lower-triangular ``L`` with ``m == L @ L.T``.

    Raises :class:`NotSymmetricError` for asymmetric input and
    :class:`NotPositiveDefiniteError` when the factorization breaks down.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    _require_finite(m, "cholesky input")
    if np.max(np.abs(m - m.T), initial=0.0) > sym_tol:
        raise NotSymmetricError("matrix is not symmetric within tolerance")
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {exc}") from None


def is_psd(m) -> bool:
    try:
        cholesky_factor(m)
    except NotPositiveDefiniteError:
        return False
    return True


@dataclass
class GradCheckResult:
    max_rel_error: float
    rel_errors: np.ndarray
    fd_grad: np.ndarray
    analytic_grad: np.ndarray = field(repr=False)


def fd_gradient_check(
    f: Callable[[np.ndarray], float],
    grad,
    x0,
    h: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare an analytic gradient against central differences.

    ``grad`` is either the gradient vector at ``x0`` or a callable returning it.
    Relative error per coordinate is ``|g - g_fd| / max(|g|, |g_fd|, floor)``.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"h must lie in (0, 1e-2], got {h}")
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    g = np.asarray(grad(x0) if callable(grad) else grad, dtype=np.float64).ravel()
    if g.shape != x0.shape:
        raise ValueError("gradient and parameter vector differ in length")
    fd = np.empty_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        fp = float(f(x0 + e))
        fm = float(f(x0 - e))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"f is non-finite around coordinate {i}", coordinate=i)
        fd[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
    rel = np.abs(g - fd) / denom
    return GradCheckResult(float(rel.max(initial=0.0)), rel, fd, g)


# ---------------------------------------------------------------------------
# Tensor container IO
# ---------------------------------------------------------------------------


def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains non-finite entries")
    shape = [int(s) for s in arr.shape]
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape entries must be positive, got {shape}")
    header = json.dumps(
        {"dtype": "f32", "shape": shape, "order": "row-major"}, separators=(",", ":")
    ).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _PREFIX.size:
        if not buf.startswith(MAGIC[: len(buf)]) or len(buf) < 4:
            raise BadMagicError("bad magic")
        raise TruncatedPayloadError("file ends inside the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError("bad magic")
    if version != VERSION:
        raise TensorFormatError(f"unsupported container version {version}")
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise TruncatedPayloadError("file ends inside the JSON header")
    try:
        header = json.loads(buf[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"unreadable header: {exc}") from None
    if header.get("dtype") != "f32" or header.get("order") != "row-major":
        raise TensorFormatError(f"unsupported header {header}")
    shape = tuple(int(s) for s in header["shape"])
    expected = 4 * math.prod(shape)
    payload = buf[start + hlen :]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, shape {list(shape)} needs {expected}"
        )
    if len(payload) != expected:
        raise ShapeMismatchError(
            f"payload has {len(payload)} bytes, shape {list(shape)} needs {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)


def tensor_write(t, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def tensor_read(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Layout helpers
# ---------------------------------------------------------------------------


def frames_to_temporal_batch(x: np.ndarray) -> np.ndarray:
    """(N, C, h, w) -> (h*w, N, C).

    Spatial positions become the batch axis and frames the sequence axis,
    via the explicit permutation (1, 2, 0) of (N, h*w, C).
    """
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.reshape(n, c, h * w).transpose(2, 0, 1))


def temporal_batch_to_frames(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`frames_to_temporal_batch`."""
    s, n, c = x.shape
    if s != h * w:
        raise ValueError(f"batch axis {s} does not match {h}x{w}")
    return np.ascontiguousarray(x.transpose(1, 2, 0).reshape(n, c, h, w))
