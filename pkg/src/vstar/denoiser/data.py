"""Procedural dynamic videos used to train and probe the toy denoiser.

Every motif changes monotonically over time and renders deterministically
from ``(spec, seed)``. Videos are (N, 3, H, W) arrays in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from vstar.tensor_core import SeededRng

MOTIFS = ("color_transition", "growing_disk", "moving_gradient", "two_phase_scene")

PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}

SCENES = ("day", "night")

TEXTURE_AMPLITUDE = 0.03


class DatasetSpecError(ValueError):
    pass


class VideoSample(NamedTuple):
    video: np.ndarray  # (N, 3, H, W) in [-1, 1]
    caption: str
    stages: tuple[str, ...]


def _color(name: str) -> np.ndarray:
    try:
        return np.asarray(PALETTE[name]) * 2.0 - 1.0
    except KeyError:
        raise DatasetSpecError(f"unknown color {name!r}; choose from {sorted(PALETTE)}") from None


@dataclass(frozen=True)
class SyntheticVideoSpec:
    motif: str
    params: dict = field(default_factory=dict)
    caption: str | None = None

    def __post_init__(self):
        if self.motif not in MOTIFS:
            raise DatasetSpecError(f"unknown motif {self.motif!r}; choose from {MOTIFS}")
        object.__setattr__(self, "params", dict(self.params))
        _validate(self.motif, self.params)
        if self.caption is None:
            object.__setattr__(self, "caption", default_caption(self.motif, self.params))

    @property
    def caption_tokens(self) -> list[str]:
        return self.caption.lower().split()

    @property
    def stages(self) -> list[str]:
        return stage_captions(self.motif, self.params)

    def to_json(self) -> dict:
        return {"motif": self.motif, "params": dict(self.params), "caption": self.caption}

    @classmethod
    def from_json(cls, obj) -> "SyntheticVideoSpec":
        if not isinstance(obj, dict):
            raise DatasetSpecError(f"spec entry must be an object, got {type(obj).__name__}")
        unknown = set(obj) - {"motif", "params", "caption"}
        if unknown:
            raise DatasetSpecError(f"unknown spec key(s): {sorted(unknown)}")
        if "motif" not in obj:
            raise DatasetSpecError("spec entry is missing key 'motif'")
        return cls(obj["motif"], obj.get("params", {}), obj.get("caption"))


_PARAM_DEFAULTS = {
    "color_transition": {"from": "red", "to": "blue"},
    "growing_disk": {"color": "green", "r0": 1.0, "r1": 5.0},
    "moving_gradient": {"c1": "blue", "c2": "yellow", "speed": 0.35},
    "two_phase_scene": {"a": "day", "b": "night", "switch": 0.5},
}


def _params(motif, params):
    out = dict(_PARAM_DEFAULTS[motif])
    out.update(params)
    return out


def _validate(motif, params):
    unknown = set(params) - set(_PARAM_DEFAULTS[motif])
    if unknown:
        raise DatasetSpecError(f"unknown {motif} param(s): {sorted(unknown)}")
    p = _params(motif, params)
    if motif == "color_transition":
        _color(p["from"]), _color(p["to"])
    elif motif == "growing_disk":
        _color(p["color"])
        if not 0 <= p["r0"] < p["r1"]:
            raise DatasetSpecError("growing_disk needs 0 <= r0 < r1")
    elif motif == "moving_gradient":
        _color(p["c1"]), _color(p["c2"])
        if p["speed"] <= 0:
            raise DatasetSpecError("moving_gradient speed must be positive")
    elif motif == "two_phase_scene":
        if p["a"] not in SCENES or p["b"] not in SCENES or p["a"] == p["b"]:
            raise DatasetSpecError(f"two_phase_scene needs two different scenes from {SCENES}")
        if not 0 < p["switch"] < 1:
            raise DatasetSpecError("two_phase_scene switch must lie in (0, 1)")


def default_caption(motif, params) -> str:
    p = _params(motif, params)
    if motif == "color_transition":
        return f"{p['from']} to {p['to']} transition"
    if motif == "growing_disk":
        return f"growing {p['color']} disk"
    if motif == "moving_gradient":
        return f"{p['c1']} {p['c2']} gradient moving"
    return f"{p['a']} to {p['b']} scene"


def stage_captions(motif, params) -> list[str]:
    """Per-stage sub-prompts: what a synopsis of this clip would say."""
    p = _params(motif, params)
    if motif == "color_transition":
        return [f"{p['from']} screen", f"{p['to']} screen"]
    if motif == "growing_disk":
        return [f"small {p['color']} disk", f"large {p['color']} disk"]
    if motif == "moving_gradient":
        return [f"{p['c1']} {p['c2']} gradient left", f"{p['c1']} {p['c2']} gradient right"]
    return [f"{p['a']} scene", f"{p['b']} scene"]


def _scene(name, h, w):
    img = np.empty((3, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    if name == "day":
        img[:, : h // 2] = _color("cyan")[:, None, None] * 0.6 + 0.2
        img[:, h // 2 :] = _color("green")[:, None, None] * 0.7
        body = (yy - 3) ** 2 + (xx - w + 4) ** 2 <= 5
        img[:, body] = _color("yellow")[:, None]
    else:
        img[:, : h // 2] = -0.85
        img[2, : h // 2] = -0.4
        img[:, h // 2 :] = -0.9
        img[1, h // 2 :] = -0.6
        body = (yy - 3) ** 2 + (xx - 4) ** 2 <= 3
        img[:, body] = 0.9
    return img


def disk_mask(radius: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - h // 2) ** 2 + (xx - w // 2) ** 2 <= radius**2


def render(spec: SyntheticVideoSpec, n_frames: int, seed: int, size: int = 16) -> np.ndarray:
    if n_frames < 2:
        raise DatasetSpecError("n_frames must be >= 2")
    p = _params(spec.motif, spec.params)
    h = w = size
    s = np.arange(n_frames) / (n_frames - 1)  # progress in [0, 1]
    video = np.empty((n_frames, 3, h, w))
    if spec.motif == "color_transition":
        a, b = _color(p["from"]), _color(p["to"])
        for t in range(n_frames):
            video[t] = ((1 - s[t]) * a + s[t] * b)[:, None, None]
    elif spec.motif == "growing_disk":
        c = _color(p["color"])
        for t in range(n_frames):
            r = p["r0"] + (p["r1"] - p["r0"]) * s[t]
            video[t] = -1.0
            video[t][:, disk_mask(r, h, w)] = c[:, None]
    elif spec.motif == "moving_gradient":
        c1, c2 = _color(p["c1"]), _color(p["c2"])
        xx = np.arange(w) / w
        for t in range(n_frames):
            # phase advances by `speed` cycles over the whole clip
            wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx - p["speed"] * s[t]))
            row = c1[:, None] * (1 - wave) + c2[:, None] * wave
            video[t] = row[:, None, :]
    else:
        a, b = _scene(p["a"], h, w), _scene(p["b"], h, w)
        width = 0.15
        for t in range(n_frames):
            m = np.clip((s[t] - p["switch"]) / width + 0.5, 0.0, 1.0)
            video[t] = (1 - m) * a + m * b
    texture = SeededRng(seed).uniform(-TEXTURE_AMPLITUDE, TEXTURE_AMPLITUDE, (1, 3, h, w))
    return np.clip(video + texture, -1.0, 1.0)


def generate_dataset(specs, n_frames: int, seed: int, size: int = 16):
    """Render each spec; video ``i`` uses the child stream ``split(i)`` of ``seed``."""
    specs = [s if isinstance(s, SyntheticVideoSpec) else SyntheticVideoSpec.from_json(s) for s in specs]
    if not specs:
        raise DatasetSpecError("need at least one spec")
    root = SeededRng(seed)
    out = []
    for i, spec in enumerate(specs):
        child = root.split(i)
        out.append(VideoSample(render(spec, n_frames, child.seed, size), spec.caption, tuple(spec.stages)))
    return out


def default_specs() -> list[SyntheticVideoSpec]:
    pairs = [
        ("red", "blue"), ("blue", "red"), ("green", "yellow"), ("yellow", "green"),
        ("white", "black"), ("black", "white"), ("cyan", "magenta"), ("magenta", "cyan"),
    ]
    specs = [SyntheticVideoSpec("color_transition", {"from": a, "to": b}) for a, b in pairs]
    specs += [
        SyntheticVideoSpec("growing_disk", {"color": c, "r0": 1.0, "r1": 6.0})
        for c in ("red", "green", "blue", "yellow", "white")
    ]
    specs += [
        SyntheticVideoSpec("moving_gradient", {"c1": a, "c2": b, "speed": 0.5})
        for a, b in (("blue", "yellow"), ("red", "cyan"), ("black", "white"))
    ]
    specs += [
        SyntheticVideoSpec("two_phase_scene", {"a": "day", "b": "night"}),
        SyntheticVideoSpec("two_phase_scene", {"a": "night", "b": "day"}),
    ]
    return specs
