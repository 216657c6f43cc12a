"""Hierarchical (ladder) VAE: bottom-up encoder and top-down prior/posterior.

Level 0 is the bottom of the hierarchy (finest resolution); level
``n_levels - 1`` is the top. Level ``l`` halves the resolution on the way up
when ``l % downsample_every == 0``, so the first level always resamples.
"""

from __future__ import annotations

import dataclasses

import torch
from torch import nn

from cosdd import rng as rng_mod
from cosdd.errors import NonFiniteStats, ShapeMismatch, ShapeNotDivisible

LOG_VAR_MIN = -14.0
LOG_VAR_MAX = 14.0


@dataclasses.dataclass(frozen=True)
class HierarchyConfig:
    n_levels: int = 6
    latent_dims: tuple[int, ...] = (32, 32, 32, 32, 32, 64)
    downsample_every: int = 2
    hidden: int = 64
    batch_norm: bool = True
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "latent_dims", tuple(int(d) for d in self.latent_dims))
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if len(self.latent_dims) != self.n_levels:
            raise ValueError(
                f"latent_dims has {len(self.latent_dims)} entries for {self.n_levels} levels"
            )
        if min(self.latent_dims) < 1 or self.hidden < 1 or self.downsample_every < 1:
            raise ValueError("latent dims, hidden channels and downsample_every must be >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "HierarchyConfig":
        if name == "large":
            base = dict(n_levels=14, latent_dims=(64,) * 13 + (128,))
        elif name == "small":
            base = dict(n_levels=6, latent_dims=(32,) * 5 + (64,))
        else:
            raise ValueError(f"unknown preset {name!r}")
        base.update(overrides)
        return cls(**base)

    @property
    def downsample(self) -> tuple[bool, ...]:
        return tuple(l % self.downsample_every == 0 for l in range(self.n_levels))

    @property
    def total_factor(self) -> int:
        return 2 ** sum(self.downsample)


@dataclasses.dataclass
class GaussianStats:
    """Diagonal Gaussian parameters; ``log_var`` is clamped on construction."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ShapeMismatch(f"mean {tuple(self.mean.shape)} vs log_var {tuple(self.log_var.shape)}")
        self.log_var = torch.clamp(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    @classmethod
    def standard(cls, shape, dtype=None, device=None):
        zeros = torch.zeros(shape, dtype=dtype, device=device)
        return cls(zeros, zeros.clone())

    @property
    def std(self):
        return torch.exp(0.5 * self.log_var)

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.mean).all() and torch.isfinite(self.log_var).all())


def reparameterize(stats: GaussianStats, eps: torch.Tensor) -> torch.Tensor:
    return stats.mean + torch.exp(0.5 * stats.log_var) * eps


def kl_gaussian_elementwise(q: GaussianStats, p: GaussianStats) -> torch.Tensor:
    if q.mean.shape != p.mean.shape:
        raise ShapeMismatch(f"posterior {tuple(q.mean.shape)} vs prior {tuple(p.mean.shape)}")
    return 0.5 * (
        torch.exp(q.log_var - p.log_var)
        + (p.mean - q.mean) ** 2 * torch.exp(-p.log_var)
        - 1.0
        + p.log_var
        - q.log_var
    )


def kl_gaussian(q: GaussianStats, p: GaussianStats) -> torch.Tensor:
    """KL(q || p) in nats for diagonal Gaussians, summed over all elements."""
    return kl_gaussian_elementwise(q, p).sum()


@dataclasses.dataclass
class LatentLevel:
    z: torch.Tensor
    prior: GaussianStats
    posterior: GaussianStats | None = None
    kl: torch.Tensor | None = None  # per batch element, nats


@dataclasses.dataclass
class LatentHierarchy:
    """Samples of every latent level plus the decoded image-resolution features.

    ``levels[0]`` is the bottom level. ``features`` is what both decoders
    consume.
    """

    levels: list[LatentLevel]
    features: torch.Tensor

    @property
    def from_posterior(self) -> bool:
        return all(level.posterior is not None for level in self.levels)

    @property
    def kl_per_level(self) -> list[torch.Tensor]:
        if not self.from_posterior:
            raise ValueError("KL is undefined for latents sampled from the prior")
        return [level.kl for level in self.levels]

    @property
    def kl(self) -> torch.Tensor:
        """Total KL per batch element: the sum of the per-level terms."""
        total = self.kl_per_level[0]
        for term in self.kl_per_level[1:]:
            total = total + term
        return total

    def detach(self) -> "LatentHierarchy":
        return LatentHierarchy(
            [dataclasses.replace(level, z=level.z.detach()) for level in self.levels],
            self.features.detach(),
        )


class GatedBlock(nn.Module):
    """Residual branch scaled by an elementwise sigmoid gate."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, 2 * channels, 3, padding=1)

    def forward(self, x):
        value, gate = self.conv(x).chunk(2, dim=1)
        return x + value * torch.sigmoid(gate)


class ResidualBlock(nn.Module):
    """Two conv -> batch norm -> Mish sequences on a residual path, then a gate."""

    def __init__(self, channels, batch_norm=True):
        super().__init__()
        norm = (lambda: nn.BatchNorm2d(channels)) if batch_norm else nn.Identity
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            norm(),
            nn.Mish(),
            nn.Conv2d(channels, channels, 3, padding=1),
            norm(),
            nn.Mish(),
        )
        self.gate = GatedBlock(channels)

    def forward(self, x):
        return self.gate(x + self.body(x))


def _stats_conv(in_channels, latent_dim):
    conv = nn.Conv2d(in_channels, 2 * latent_dim, 3, padding=1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


def _split_stats(out) -> GaussianStats:
    mean, log_var = out.chunk(2, dim=1)
    return GaussianStats(mean, log_var)


class LadderVAE(nn.Module):
    """Bottom-up encoder and top-down generative ladder."""

    def __init__(self, config: HierarchyConfig):
        super().__init__()
        self.config = config
        c = config.hidden
        self.stem = nn.Conv2d(config.in_channels, c, 3, padding=1)
        self.down = nn.ModuleList(
            nn.Conv2d(c, c, 3, stride=2, padding=1) if ds else nn.Identity()
            for ds in config.downsample
        )
        self.up_blocks = nn.ModuleList(
            ResidualBlock(c, config.batch_norm) for _ in range(config.n_levels)
        )

        top = config.n_levels - 1
        self.prior_nets = nn.ModuleList(
            _stats_conv(c, d) if l < top else nn.Identity()
            for l, d in enumerate(config.latent_dims)
        )
        self.posterior_nets = nn.ModuleList(
            _stats_conv(c if l == top else 2 * c, d) for l, d in enumerate(config.latent_dims)
        )
        self.z_proj = nn.ModuleList(nn.Conv2d(d, c, 1) for d in config.latent_dims)
        self.down_blocks = nn.ModuleList(
            ResidualBlock(c, config.batch_norm) for _ in range(config.n_levels)
        )
        self.upsample = nn.ModuleList(
            nn.ConvTranspose2d(c, c, 2, stride=2) if ds else nn.Identity()
            for ds in config.downsample
        )
        self._init_weights()

    def _init_weights(self):
        stats_convs = {id(m) for m in list(self.prior_nets) + list(self.posterior_nets)}
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)) and id(module) not in stats_convs:
                nn.init.kaiming_normal_(module.weight, nonlinearity="linear")
                nn.init.zeros_(module.bias)

    # shapes -----------------------------------------------------------
    def check_shape(self, height, width):
        f = self.config.total_factor
        if height % f or width % f:
            raise ShapeNotDivisible(
                f"spatial dims {height}x{width} must be divisible by {f}"
            )

    def latent_shapes(self, height, width) -> list[tuple[int, int, int]]:
        """(channels, h, w) of every level for an image of the given size."""
        self.check_shape(height, width)
        shapes = []
        h, w = height, width
        for dim, ds in zip(self.config.latent_dims, self.config.downsample):
            if ds:
                h, w = h // 2, w // 2
            shapes.append((dim, h, w))
        return shapes

    def draw_eps(self, batch, height, width, generator=None, dtype=None):
        """Standard normal noise for every level, drawn bottom to top."""
        return [
            rng_mod.randn((batch, *shape), generator, dtype=dtype)
            for shape in self.latent_shapes(height, width)
        ]

    # passes -----------------------------------------------------------
    def encode_bottom_up(self, x: torch.Tensor) -> list[torch.Tensor]:
        """One feature map per level, finest first."""
        if x.dim() != 4:
            raise ShapeMismatch(f"expected (B, C, H, W) input, got {tuple(x.shape)}")
        self.check_shape(*x.shape[-2:])
        h = self.stem(x)
        features = []
        for down, block in zip(self.down, self.up_blocks):
            h = block(down(h))
            features.append(h)
        return features

    def _top_down(self, features, eps, generator, batch, spatial, use_posterior):
        n = self.config.n_levels
        shapes = self.latent_shapes(*spatial)
        levels: list[LatentLevel | None] = [None] * n
        state = None
        for l in reversed(range(n)):
            dim, h, w = shapes[l]
            if l == n - 1:
                ref = features[l] if use_posterior else self.z_proj[l].weight
                prior = GaussianStats.standard((batch, dim, h, w), dtype=ref.dtype, device=ref.device)
            else:
                prior = _split_stats(self.prior_nets[l](state))
            posterior = None
            if use_posterior:
                inp = features[l] if state is None else torch.cat([state, features[l]], dim=1)
                posterior = _split_stats(self.posterior_nets[l](inp))
                if not (posterior.is_finite() and prior.is_finite()):
                    raise NonFiniteStats(f"non-finite Gaussian statistics at level {l}")
            source = posterior if use_posterior else prior
            noise = eps[l] if eps is not None else rng_mod.randn(
                tuple(source.mean.shape), generator, dtype=source.mean.dtype
            )
            if noise.shape != source.mean.shape:
                raise ShapeMismatch(
                    f"eps at level {l} has shape {tuple(noise.shape)}, expected {tuple(source.mean.shape)}"
                )
            z = reparameterize(source, noise)
            kl = None
            if use_posterior:
                kl = kl_gaussian_elementwise(posterior, prior).flatten(1).sum(dim=1)
            levels[l] = LatentLevel(z=z, prior=prior, posterior=posterior, kl=kl)
            proj = self.z_proj[l](z)
            state = proj if state is None else state + proj
            state = self.upsample[l](self.down_blocks[l](state))
        return LatentHierarchy(levels, state)

    def sample_posterior(self, features, generator=None, eps=None) -> LatentHierarchy:
        """Top-down pass drawing each level from q(z_l | z_>l, x)."""
        batch = features[0].shape[0]
        f0 = 2 if self.config.downsample[0] else 1
        spatial = (features[0].shape[-2] * f0, features[0].shape[-1] * f0)
        return self._top_down(features, eps, generator, batch, spatial, use_posterior=True)

    def sample_prior(self, batch, height, width, generator=None, eps=None) -> LatentHierarchy:
        """Ancestral sampling from p(z); posterior slots stay empty."""
        self.check_shape(height, width)
        return self._top_down(None, eps, generator, batch, (height, width), use_posterior=False)

    def forward(self, x, generator=None, eps=None) -> LatentHierarchy:
        return self.sample_posterior(self.encode_bottom_up(x), generator, eps)

