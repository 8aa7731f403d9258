"""Netpbm images and CSV tables.

Floats in CSV are written with ``%.10g`` so that re-runs are byte-identical.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np


def video_to_uint8(video) -> np.ndarray:
    """Map [-1, 1] to [0, 255] (N, C, H, W) -> (N, H, W, C)."""
    v = np.asarray(video, dtype=np.float64)
    u = np.clip(np.round((v + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(u.transpose(0, 2, 3, 1))


def write_ppm(rgb: np.ndarray, path) -> None:
    h, w, c = rgb.shape
    if c != 3:
        raise ValueError("PPM needs three channels")
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 -> (H, W, 3) uint8. Comments are not supported."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pix = parts[4]
    if len(pix) != w * h * 3:
        raise ValueError(f"{path}: pixel payload has wrong length")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w, 3)


def write_video_frames(video, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(video_to_uint8(video)):
        p = directory / f"frame_{i:03d}.ppm"
        write_ppm(frame, p)
        paths.append(p)
    return paths


def read_video_frames(directory) -> np.ndarray:
    files = sorted(Path(directory).glob("frame_*.ppm"))
    if not files:
        raise FileNotFoundError(f"no frame_*.ppm files in {directory}")
    frames = np.stack([read_ppm(f) for f in files]).astype(np.float64)
    return frames.transpose(0, 3, 1, 2) / 127.5 - 1.0


def write_pgm(matrix, path, lo: float | None = None, hi: float | None = None, scale: int = 1) -> None:
    """8-bit P5 heatmap with linear min-max scaling (or the given range)."""
    m = np.asarray(matrix, dtype=np.float64)
    lo = m.min() if lo is None else lo
    hi = m.max() if hi is None else hi
    if hi > lo:
        g = np.round((np.clip(m, lo, hi) - lo) / (hi - lo) * 255.0)
    else:
        g = np.full(m.shape, 255.0)
    g = g.astype(np.uint8)
    if scale > 1:
        g = np.kron(g, np.ones((scale, scale), dtype=np.uint8))
    h, w = g.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + g.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8).reshape(h, w)


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "%.10g" % float(x)
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")
