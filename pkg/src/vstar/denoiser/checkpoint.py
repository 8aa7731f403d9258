"""Checkpoint = directory of tensor containers plus ``config.json``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from vstar.denoiser.model import ModelConfig, VideoDenoiser
from vstar.denoiser.schedule import DiffusionSchedule
from vstar.tensor_core import tensor_read, tensor_write
from vstar.vsp import TextEncoderParams, Vocab, toy_text_encode

CONFIG_NAME = "config.json"
WEIGHTS_DIR = "weights"


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelCheckpoint:
    model: VideoDenoiser
    vocab: Vocab
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg

    def text_params(self) -> TextEncoderParams:
        enc = self.model.text
        return TextEncoderParams(
            enc.embedding.weight.detach().double().numpy(),
            enc.proj.weight.detach().double().numpy(),
            enc.proj.bias.detach().double().numpy(),
        )

    def encode(self, prompts) -> np.ndarray:
        """K x D embeddings for a list of prompts."""
        params = self.text_params()
        return np.stack([toy_text_encode(p, self.vocab, params) for p in prompts])

    def config_json(self) -> dict:
        return {
            "model": self.config.to_json(),
            "vocab": list(self.vocab.tokens),
            "schedule": self.schedule.to_json(),
            "meta": self.meta,
        }

    def save(self, path) -> None:
        path = Path(path)
        (path / WEIGHTS_DIR).mkdir(parents=True, exist_ok=True)
        for name, tensor in self.model.state_dict().items():
            tensor_write(tensor.detach().double().numpy().reshape(tensor.shape or (1,)), path / WEIGHTS_DIR / f"{name}.vstr")
        (path / CONFIG_NAME).write_text(json.dumps(self.config_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        path = Path(path)
        cfg_path = path / CONFIG_NAME
        if not cfg_path.is_file():
            raise CheckpointError(f"no {CONFIG_NAME} in {path}")
        raw = json.loads(cfg_path.read_text())
        cfg = ModelConfig.from_json(raw["model"])
        model = VideoDenoiser(cfg)
        state = {}
        for name, ref in model.state_dict().items():
            f = path / WEIGHTS_DIR / f"{name}.vstr"
            if not f.is_file():
                raise CheckpointError(f"missing weight file {f}")
            arr = tensor_read(f)
            if arr.size != ref.numel():
                raise CheckpointError(f"{name}: expected {tuple(ref.shape)}, file holds {arr.shape}")
            state[name] = torch.as_tensor(arr.reshape(ref.shape), dtype=ref.dtype)
        model.load_state_dict(state)
        model.eval()
        return cls(model, Vocab(raw["vocab"]), DiffusionSchedule(**raw["schedule"]), raw.get("meta", {}))


def reference_checkpoint_path() -> Path:
    return Path(__file__).resolve().parent.parent / "data" / "reference"


def load_reference() -> ModelCheckpoint:
    return ModelCheckpoint.load(reference_checkpoint_path())
