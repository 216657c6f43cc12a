"""The complete denoiser: ladder VAE, autoregressive noise decoder and signal head."""

from __future__ import annotations

import dataclasses

import torch
from torch import nn

from cosdd.ar_decoder import ARDecoder, ARDecoderConfig, ReceptiveFieldSpec
from cosdd.ladder import HierarchyConfig, LadderVAE, LatentHierarchy
from cosdd.signal_decoder import SignalDecoder, SignalDecoderConfig


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    hierarchy: HierarchyConfig = HierarchyConfig()
    ar: ARDecoderConfig = ARDecoderConfig()
    signal: SignalDecoderConfig = SignalDecoderConfig()

    @classmethod
    def preset(cls, name="small", rf: ReceptiveFieldSpec | None = None, **hierarchy_overrides):
        ar = ARDecoderConfig() if rf is None else ARDecoderConfig(rf=rf)
        return cls(HierarchyConfig.preset(name, **hierarchy_overrides), ar, SignalDecoderConfig())


class Denoiser(nn.Module):
    """Container for the three networks.

    ``vae`` and ``ar`` are optimized on the ELBO, ``signal`` on the L2 loss.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.vae = LadderVAE(config.hierarchy)
        self.ar = ARDecoder(config.ar, cond_channels=config.hierarchy.hidden)
        self.signal = SignalDecoder(config.signal, in_channels=config.hierarchy.hidden)

    def vae_parameters(self):
        return list(self.vae.parameters()) + list(self.ar.parameters())

    def encoder_parameters(self):
        """Parameters of the bottom-up path and posterior heads."""
        vae = self.vae
        return (
            list(vae.stem.parameters())
            + list(vae.down.parameters())
            + list(vae.up_blocks.parameters())
            + list(vae.posterior_nets.parameters())
        )

    def signal_parameters(self):
        return list(self.signal.parameters())

    def encode(self, x, generator=None, eps=None) -> LatentHierarchy:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        return self.vae(x, generator, eps)

    def predict_signal(self, latents: LatentHierarchy) -> torch.Tensor:
        return self.signal(latents.features)
