"""Denoising by posterior sampling, plus the noise-resampling diagnostics.

All public functions take images in raw intensity units and return raw
units; normalization with the stored statistics happens internally.
"""

from __future__ import annotations

import copy
import dataclasses
import math

import numpy as np
import torch
from torch import nn

from cosdd import rng as rng_mod
from cosdd.checkpoint import Checkpoint
from cosdd.data import NormStats
from cosdd.model import Denoiser


@dataclasses.dataclass
class TrainedModel:
    """A denoiser in eval mode together with its normalization statistics."""

    model: Denoiser
    norm_stats: NormStats
    # optimizer steps behind the weights; 0 marks an untrained model
    step: int = 0

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "TrainedModel":
        return cls(checkpoint.build_model(), checkpoint.norm_stats, checkpoint.step)

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    @property
    def factor(self) -> int:
        return self.model.config.hierarchy.total_factor


@dataclasses.dataclass
class DenoiseRequest:
    image: np.ndarray
    n_samples: int = 100
    seed: int = 0
    tile: int | None = None
    overlap: int | None = None
    # posterior samples decoded per forward pass
    chunk: int = 25
    clip: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")


def _round_up(value, factor):
    return int(math.ceil(value / factor) * factor)


def _prepare(image, models: TrainedModel):
    """Normalize and reflect-pad ``image`` to a multiple of the downsampling factor."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    h, w = image.shape
    f = models.factor
    ph, pw = _round_up(h, f) - h, _round_up(w, f) - w
    x = models.norm_stats.normalize(image)
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw)), mode="reflect" if min(h, w) > max(ph, pw) else "edge")
    return torch.as_tensor(x, dtype=models.dtype)[None, None], (h, w)


def _sample_eps(models: TrainedModel, streams, height, width):
    """Per-sample latent noise for the whole padded image, one list entry per level."""
    return models.model.vae.draw_eps(len(streams), height, width, streams, dtype=models.dtype)


def _tile_axis(length, tile, overlap):
    """(start, keep_lo, keep_hi) per tile along one axis."""
    if tile >= length:
        return [(0, 0, length)]
    stride = tile - 2 * overlap
    if stride <= 0:
        raise ValueError(f"tile {tile} too small for overlap {overlap}")
    starts = list(range(0, length - tile, stride)) + [length - tile]
    spans = []
    prev_hi = 0
    for start in starts:
        hi = length if start + tile >= length else start + tile - overlap
        spans.append((start, prev_hi, hi))
        prev_hi = hi
    return spans


@torch.no_grad()
def _signal_samples(models: TrainedModel, x, eps, tile=None, overlap=0):
    """Decoded signal for every posterior sample in ``eps``: (n, H, W), normalized."""
    model = models.model
    n = eps[0].shape[0]
    h, w = x.shape[-2:]
    if tile is None or (tile >= h and tile >= w):
        latents = model.vae(x.expand(n, -1, -1, -1), eps=eps)
        return model.predict_signal(latents)
    f = models.factor
    level_factors = []
    acc = 1
    for ds in model.config.hierarchy.downsample:
        acc *= 2 if ds else 1
        level_factors.append(acc)
    out = torch.empty((n, h, w), dtype=x.dtype)
    for r0, rlo, rhi in _tile_axis(h, tile, overlap):
        th = min(tile, h)
        for c0, clo, chi in _tile_axis(w, tile, overlap):
            tw = min(tile, w)
            assert r0 % f == 0 and c0 % f == 0
            tile_eps = [
                e[:, :, r0 // lf : (r0 + th) // lf, c0 // lf : (c0 + tw) // lf]
                for e, lf in zip(eps, level_factors)
            ]
            patch = x[..., r0 : r0 + th, c0 : c0 + tw].expand(n, -1, -1, -1)
            s = model.predict_signal(model.vae(patch, eps=tile_eps))
            out[:, rlo:rhi, clo:chi] = s[:, rlo - r0 : rhi - r0, clo - c0 : chi - c0]
    return out


def _check_tiling(models, req: DenoiseRequest):
    if req.tile is None:
        return None, 0
    f = models.factor
    overlap = req.overlap if req.overlap is not None else receptive_radius(models.model)
    ar_length = models.model.ar.extent
    if overlap < ar_length:
        raise ValueError(f"tile overlap {overlap} is below the AR receptive field length {ar_length}")
    return _round_up(req.tile, f), _round_up(overlap, f)


def _posterior_signals(req: DenoiseRequest, models: TrainedModel):
    """Yield chunks of decoded posterior samples in normalized units."""
    models.model.eval()
    x, (h, w) = _prepare(req.image, models)
    tile, overlap = _check_tiling(models, req)
    streams = rng_mod.per_item_generators(req.seed, req.n_samples)
    for start in range(0, req.n_samples, req.chunk):
        part = streams[start : start + req.chunk]
        eps = _sample_eps(models, part, *x.shape[-2:])
        yield _signal_samples(models, x, eps, tile, overlap)[:, :h, :w]


def denoise(req: DenoiseRequest, models: TrainedModel) -> np.ndarray:
    """Average of ``n_samples`` decoded posterior samples, in raw units.

    Sample k always uses the k-th stream derived from ``req.seed``, so results
    do not depend on ``chunk`` or tiling.
    """
    total = None
    for signals in _posterior_signals(req, models):
        part = signals.double().sum(dim=0)
        total = part if total is None else total + part
    estimate = models.norm_stats.denormalize((total / req.n_samples).numpy())
    if req.clip:
        estimate = np.clip(estimate, req.image.min(), req.image.max())
    return estimate


def sample_solutions(image, n, models: TrainedModel, seed=0, **kwargs) -> list[np.ndarray]:
    """``n`` independent clean-image samples, each f(z) for one z ~ q(z | x)."""
    req = DenoiseRequest(np.asarray(image), n_samples=n, seed=seed, **kwargs)
    out = []
    for signals in _posterior_signals(req, models):
        out.extend(models.norm_stats.denormalize(s.double().numpy()) for s in signals)
    return out


@torch.no_grad()
def encode(image, models: TrainedModel, seed=0, n=1):
    """Posterior latents of ``image`` (n samples) and the unpadded size."""
    models.model.eval()
    x, size = _prepare(image, models)
    streams = rng_mod.per_item_generators(seed, n)
    eps = _sample_eps(models, streams, *x.shape[-2:])
    return models.model.vae(x.expand(n, -1, -1, -1), eps=eps), size


@torch.no_grad()
def resample_noisy(image, models: TrainedModel, seed=0, return_signal=False):
    """Encode ``image``, then draw a new noisy image from the AR decoder.

    With ``return_signal`` also returns the signal-decoder output for the same
    latent sample, the natural reference for the resampled noise.
    """
    latents, (h, w) = encode(image, models, seed)
    gen = rng_mod.make_generator(seed + 1)
    sample = models.model.ar.sample(latents.features, gen)[0, :h, :w]
    noisy = models.norm_stats.denormalize(sample.double().numpy())
    if not return_signal:
        return noisy
    signal = models.model.predict_signal(latents)[0, :h, :w]
    return noisy, models.norm_stats.denormalize(signal.double().numpy())


@torch.no_grad()
def ar_mean_signal(latents, models: TrainedModel, L: int, seed=0, chunk=250, return_std=False):
    """Mean of ``L`` AR-decoder samples for the first latent in ``latents``.

    Estimates the signal underlying z without the signal decoder. With
    ``return_std`` also returns the per-pixel standard error of the mean.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    features = latents.features[:1]
    gen = rng_mod.make_generator(seed)
    total = torch.zeros(features.shape[-2:], dtype=torch.float64)
    total_sq = torch.zeros_like(total)
    done = 0
    while done < L:
        n = min(chunk, L - done)
        samples = models.model.ar.sample(features.expand(n, -1, -1, -1), gen).double()
        total += samples.sum(dim=0)
        total_sq += (samples**2).sum(dim=0)
        done += n
    mean = total / L
    stats = models.norm_stats
    estimate = stats.denormalize(mean.numpy())
    if not return_std:
        return estimate
    var = torch.clamp(total_sq / L - mean**2, min=0.0) * L / max(L - 1, 1)
    return estimate, (torch.sqrt(var / L) * stats.std).numpy()


def receptive_radius(model: Denoiser, max_size=1 << 16) -> int:
    """Architectural receptive radius of the image -> signal-estimate path.

    The footprint depends only on kernel sizes, strides and depth, so the
    gradient probe runs on a narrow, randomly weighted copy of the
    architecture (zero-initialized heads would otherwise hide dependencies).
    Kernels are square, so a strip one coarsest-pixel tall gives the radius.
    """
    config = model.config
    hierarchy = dataclasses.replace(
        config.hierarchy, hidden=2, latent_dims=(1,) * config.hierarchy.n_levels, batch_norm=False
    )
    signal = dataclasses.replace(config.signal, filters=2)
    torch.manual_seed(0)
    probe = Denoiser(dataclasses.replace(config, hierarchy=hierarchy, signal=signal)).double().eval()
    gen = torch.Generator().manual_seed(0)
    for name, module in list(probe.named_modules()):
        if isinstance(module, nn.ReLU):
            # dead units would cut paths out of the footprint
            parent, _, attr = name.rpartition(".")
            setattr(probe.get_submodule(parent), attr, nn.Identity())
        elif isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen, dtype=torch.float64) * 0.5)
    f = hierarchy.total_factor
    size = _round_up(64, f)
    while True:
        x = torch.zeros((1, 1, f, size), dtype=torch.float64, requires_grad=True)
        eps = probe.vae.draw_eps(1, f, size, rng_mod.make_generator(0), dtype=torch.float64)
        out = probe.signal(probe.vae(x, eps=eps).features, stop_gradient=False)
        c = size // 2
        (grad,) = torch.autograd.grad(out[0, f // 2, c], x)
        cols = np.nonzero(grad[0, 0].abs().amax(dim=0).numpy() > 0)[0]
        radius = int(np.abs(cols - c).max()) if cols.size else 0
        if radius < c - f or size >= max_size:
            return radius + f
        size *= 2
