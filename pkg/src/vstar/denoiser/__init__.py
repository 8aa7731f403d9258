"""Toy latent video diffusion model hosting the temporal attention hooks."""

from vstar.denoiser.checkpoint import CheckpointError, ModelCheckpoint, load_reference, reference_checkpoint_path
from vstar.denoiser.data import (
    MOTIFS,
    DatasetSpecError,
    SyntheticVideoSpec,
    VideoSample,
    default_specs,
    generate_dataset,
)
from vstar.denoiser.model import ModelConfig, VideoDenoiser
from vstar.denoiser.sampling import SampleResult, constant_schedule, extract_attention, sample
from vstar.denoiser.schedule import DiffusionSchedule, add_noise
from vstar.denoiser.train import TrainConfig, TrainingDivergedError, train

__all__ = [
    "CheckpointError", "ModelCheckpoint", "load_reference", "reference_checkpoint_path",
    "MOTIFS", "DatasetSpecError", "SyntheticVideoSpec", "VideoSample", "default_specs", "generate_dataset",
    "ModelConfig", "VideoDenoiser", "SampleResult", "constant_schedule", "extract_attention", "sample",
    "DiffusionSchedule", "add_noise", "TrainConfig", "TrainingDivergedError", "train",
]
