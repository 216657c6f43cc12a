"""Unsupervised denoising of structured, signal-dependent image noise with a
ladder VAE and a receptive-field-limited autoregressive noise decoder."""

from cosdd.ar_decoder import ARDecoderConfig, ReceptiveFieldSpec
from cosdd.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cosdd.config import RunConfig, parse_config
from cosdd.data import ImageStack, NormStats, load_stack
from cosdd.inference import DenoiseRequest, TrainedModel, denoise, sample_solutions
from cosdd.ladder import HierarchyConfig
from cosdd.model import Denoiser, ModelConfig
from cosdd.trainer import TrainConfig, fit

__all__ = [
    "ARDecoderConfig", "Checkpoint", "DenoiseRequest", "Denoiser", "HierarchyConfig",
    "ImageStack", "ModelConfig", "NormStats", "ReceptiveFieldSpec", "RunConfig",
    "TrainConfig", "TrainedModel", "denoise", "fit", "load_checkpoint", "load_stack",
    "parse_config", "sample_solutions", "save_checkpoint",
]
