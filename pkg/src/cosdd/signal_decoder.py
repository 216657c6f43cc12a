"""Regression head mapping latent features to a clean-image estimate."""

from __future__ import annotations

import dataclasses

import torch
from torch import nn

from cosdd.errors import ShapeMismatch


@dataclasses.dataclass(frozen=True)
class SignalDecoderConfig:
    n_layers: int = 4
    filters: int = 128
    kernel_size: int = 3


class SignalDecoder(nn.Module):
    """Four 3x3 convolution + ReLU layers followed by a 1x1 projection to one channel.

    Input features are detached by default, so the L2 loss trains only this
    head and never reaches the encoder or the autoregressive decoder.
    """

    def __init__(self, config: SignalDecoderConfig, in_channels: int):
        super().__init__()
        self.config = config
        layers = []
        channels = in_channels
        for _ in range(config.n_layers):
            layers += [
                nn.Conv2d(channels, config.filters, config.kernel_size, padding=config.kernel_size // 2),
                nn.ReLU(),
            ]
            channels = config.filters
        layers.append(nn.Conv2d(channels, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, features, stop_gradient=True):
        if stop_gradient:
            features = features.detach()
        return self.net(features)[:, 0]


def predict_signal(latents, decoder: SignalDecoder) -> torch.Tensor:
    """Clean-image estimate f(z) of shape (B, H, W) in normalized units."""
    return decoder(latents.features)


def signal_loss(estimate, x) -> torch.Tensor:
    """Mean squared error between the estimate and the noisy image."""
    if x.dim() == 4:
        x = x[:, 0]
    if estimate.shape != x.shape:
        raise ShapeMismatch(f"estimate {tuple(estimate.shape)} vs image {tuple(x.shape)}")
    return torch.mean((estimate - x) ** 2)
