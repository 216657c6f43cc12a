"""Autoregressive Gaussian-mixture decoder with a one-dimensional receptive field.

With ``row`` orientation the distribution of pixel (i, j) depends on the
latent features and on the ``length`` pixels immediately to its left in row
i. Rows are conditionally independent given the features, so the decoder can
model noise that is correlated along rows but not 2-D signal structure.
``column`` is the transposed case. ``full`` conditions on row-major
predecessors (a vertical stack over previous rows plus the row context) and
exists for the receptive-field ablation.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Literal

import torch
from torch import nn
from torch.nn import functional as F

from cosdd import rng as rng_mod
from cosdd.errors import IndexOutOfRange, ShapeMismatch

LOG_SCALE_MIN = -7.0
LOG_SCALE_MAX = 7.0
ORIENTATIONS = ("row", "column", "full")


@dataclasses.dataclass(frozen=True)
class ReceptiveFieldSpec:
    orientation: Literal["row", "column", "full"] = "row"
    # None means unbounded; only valid for the full orientation
    length: int | None = 40

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if self.length is None and self.orientation != "full":
            raise ValueError("row/column receptive fields need a finite length")
        if self.length is not None and self.length < 1:
            raise ValueError("receptive field length must be >= 1")


def causal_context(spec: ReceptiveFieldSpec, pixel, dims) -> list[tuple[int, int]]:
    """Pixels that pixel (i, j) may condition on, in generation order."""
    i, j = pixel
    n, m = dims
    if not (0 <= i < n and 0 <= j < m):
        raise IndexOutOfRange(f"pixel {pixel} outside image of size {dims}")
    if spec.orientation == "row":
        return [(i, v) for v in range(max(0, j - spec.length), j)]
    if spec.orientation == "column":
        return [(u, j) for u in range(max(0, i - spec.length), i)]
    return [(u, v) for u in range(n) for v in range(m) if (u, v) < (i, j)]


@dataclasses.dataclass
class MixtureField:
    """Per-pixel Gaussian-mixture parameters, each of shape (B, K, H, W)."""

    logits: torch.Tensor
    means: torch.Tensor
    log_scales: torch.Tensor

    def __post_init__(self):
        if not (self.logits.shape == self.means.shape == self.log_scales.shape):
            raise ShapeMismatch("mixture parameter tensors must share one shape")
        self.log_scales = torch.clamp(self.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX)

    @property
    def n_components(self):
        return self.logits.shape[1]

    @property
    def log_weights(self):
        return torch.log_softmax(self.logits, dim=1)

    def mean(self) -> torch.Tensor:
        """Expected value of every pixel, shape (B, H, W)."""
        return (torch.softmax(self.logits, dim=1) * self.means).sum(dim=1)

    def component_log_density(self, x):
        """log N(x; mu_k, sigma_k) for every component, shape (B, K, H, W)."""
        x = x.unsqueeze(1)
        return (
            -0.5 * ((x - self.means) * torch.exp(-self.log_scales)) ** 2
            - self.log_scales
            - 0.5 * math.log(2 * math.pi)
        )

    def select(self, index) -> "MixtureField":
        return MixtureField(self.logits[index], self.means[index], self.log_scales[index])

    def transpose(self) -> "MixtureField":
        return MixtureField(
            self.logits.transpose(-1, -2),
            self.means.transpose(-1, -2),
            self.log_scales.transpose(-1, -2),
        )


def _as_image_batch(x):
    """Accept (B, H, W) or (B, 1, H, W); return (B, H, W)."""
    if x.dim() == 4:
        if x.shape[1] != 1:
            raise ShapeMismatch(f"expected a single channel, got {x.shape[1]}")
        return x[:, 0]
    if x.dim() != 3:
        raise ShapeMismatch(f"expected (B, H, W) pixels, got shape {tuple(x.shape)}")
    return x


def gmm_log_prob(field: MixtureField, x):
    """Per-pixel mixture log-likelihood (B, H, W) and its sum, in nats."""
    x = _as_image_batch(x)
    if x.shape != field.means.shape[:1] + field.means.shape[2:]:
        raise ShapeMismatch(
            f"pixels {tuple(x.shape)} do not match mixture field {tuple(field.means.shape)}"
        )
    per_pixel = torch.logsumexp(field.log_weights + field.component_log_density(x), dim=1)
    return per_pixel, per_pixel.sum()


def gmm_sample(field: MixtureField, generator=None) -> torch.Tensor:
    """One draw per pixel, shape (B, H, W). Component choice uses Gumbel-max."""
    shape = tuple(field.logits.shape)
    uniform = rng_mod.rand(shape, generator, dtype=field.logits.dtype)
    gumbel = -torch.log(-torch.log(uniform.clamp(1e-20, 1.0 - 1e-7)))
    k = torch.argmax(field.log_weights + gumbel, dim=1, keepdim=True)
    mean = torch.gather(field.means, 1, k)[:, 0]
    log_scale = torch.gather(field.log_scales, 1, k)[:, 0]
    noise = rng_mod.randn(tuple(mean.shape), generator, dtype=mean.dtype)
    return mean + torch.exp(log_scale) * noise


def layer_plan(length: int, n_blocks: int, kernel_size: int = 3):
    """Split a causal extent of exactly ``length`` pixels over the decoder layers.

    Returns ``(first_kernel, dilations)``: the input layer is a causal
    convolution of width ``first_kernel`` on the one-pixel-shifted image, and
    block ``b`` convolves with dilation ``dilations[b]`` (0 marks a pointwise
    block). Every other block is preferentially dilated 2, 4, 8, 16...; the
    schedule is shrunk greedily so the total extent equals ``length``.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    reach = kernel_size - 1
    remaining = length - 1
    dilations = []
    for b in range(n_blocks):
        wanted = 2 ** (b // 2 + 1) if b % 2 else 1
        d = wanted
        while d >= 1 and reach * d > remaining:
            d //= 2
        dilations.append(d)
        remaining -= reach * d
    first_kernel = length - reach * sum(dilations)
    return first_kernel, dilations


@dataclasses.dataclass(frozen=True)
class ARDecoderConfig:
    n_blocks: int = 8
    filters: int = 64
    n_components: int = 3
    kernel_size: int = 3
    rf: ReceptiveFieldSpec = ReceptiveFieldSpec()
    # row-context extent used by the horizontal stack when rf.length is None
    full_row_extent: int = 40
    # height of each vertical-stack kernel for the full orientation
    full_kernel_height: int = 2

    def __post_init__(self):
        if self.n_blocks < 1 or self.filters < 1 or self.n_components < 1:
            raise ValueError("n_blocks, filters and n_components must be >= 1")
        if self.kernel_size < 2:
            raise ValueError("kernel_size must be >= 2")

    @property
    def row_extent(self) -> int:
        return self.rf.length if self.rf.length is not None else self.full_row_extent

    def plan(self):
        return layer_plan(self.row_extent, self.n_blocks, self.kernel_size)


class RowCausalConv(nn.Module):
    """Convolution along the last axis seeing only current and earlier positions."""

    def __init__(self, in_channels, out_channels, kernel_size, dilation=1):
        super().__init__()
        self.pad = (kernel_size - 1) * dilation
        self.conv = nn.Conv2d(in_channels, out_channels, (1, kernel_size), dilation=(1, dilation))

    def forward(self, x):
        return self.conv(F.pad(x, (self.pad, 0, 0, 0)))


class DownCausalConv(nn.Module):
    """Convolution seeing the current and earlier rows (any column within the kernel)."""

    def __init__(self, in_channels, out_channels, kernel_height, kernel_width=3):
        super().__init__()
        self.pads = ((kernel_width - 1) // 2, (kernel_width - 1) // 2, kernel_height - 1, 0)
        self.conv = nn.Conv2d(in_channels, out_channels, (kernel_height, kernel_width))

    def forward(self, x):
        return self.conv(F.pad(x, self.pads))


def shift_right(x):
    return F.pad(x, (1, 0, 0, 0))[..., :-1]


def shift_down(x):
    return F.pad(x, (0, 0, 1, 0))[..., :-1, :]


class ARBlock(nn.Module):
    def __init__(self, filters, kernel_size, dilation):
        super().__init__()
        if dilation == 0:
            self.conv = nn.Conv2d(filters, filters, 1)
        else:
            self.conv = RowCausalConv(filters, filters, kernel_size, dilation)
        self.out = nn.Conv2d(filters, filters, 1)

    def forward(self, h, cond):
        out = self.conv(F.relu(h)) + cond
        return h + self.out(F.relu(out))


class VerticalBlock(nn.Module):
    def __init__(self, filters, kernel_height):
        super().__init__()
        self.conv = DownCausalConv(filters, filters, kernel_height)
        self.out = nn.Conv2d(filters, filters, 1)
        self.link = nn.Conv2d(filters, filters, 1)

    def forward(self, v, cond):
        v = v + self.out(F.relu(self.conv(F.relu(v)) + cond))
        return v, self.link(F.relu(v))


class ARDecoder(nn.Module):
    """p(x | z): residual causal-convolution stack emitting a mixture per pixel."""

    def __init__(self, config: ARDecoderConfig, cond_channels: int):
        super().__init__()
        self.config = config
        f = config.filters
        first_kernel, dilations = config.plan()
        self.first_kernel = first_kernel
        self.dilations = dilations
        self.input = RowCausalConv(1, f, first_kernel)
        self.cond = nn.Conv2d(cond_channels, f * (config.n_blocks + 1), 1)
        self.blocks = nn.ModuleList(
            ARBlock(f, config.kernel_size, d) for d in dilations
        )
        self.vertical = None
        if config.rf.orientation == "full":
            self.v_input = DownCausalConv(1, f, config.full_kernel_height)
            self.v_cond = nn.Conv2d(cond_channels, f * config.n_blocks, 1)
            self.vertical = nn.ModuleList(
                VerticalBlock(f, config.full_kernel_height) for _ in range(config.n_blocks)
            )
        self.head = nn.Sequential(
            nn.ReLU(),
            nn.Conv2d(f, f, 1),
            nn.ReLU(),
            nn.Conv2d(f, 3 * config.n_components, 1),
        )

    @property
    def orientation(self):
        return self.config.rf.orientation

    @property
    def extent(self) -> int:
        return self.config.row_extent

    def _forward_rows(self, x, features):
        """Row-oriented pass on (B, 1, H, W) inputs; returns raw head output."""
        conds = self.cond(features).chunk(self.config.n_blocks + 1, dim=1)
        h = self.input(shift_right(x)) + conds[0]
        if self.vertical is not None:
            v_conds = self.v_cond(features).chunk(self.config.n_blocks, dim=1)
            v = self.v_input(shift_down(x))
            for block, vblock, cond, v_cond in zip(self.blocks, self.vertical, conds[1:], v_conds):
                v, link = vblock(v, v_cond)
                h = block(h + link, cond)
        else:
            for block, cond in zip(self.blocks, conds[1:]):
                h = block(h, cond)
        return self.head(h)

    def _to_field(self, raw) -> MixtureField:
        logits, means, log_scales = raw.chunk(3, dim=1)
        return MixtureField(logits, means, log_scales)

    def forward(self, x, features) -> MixtureField:
        """Teacher-forced mixture parameters for every pixel of ``x``."""
        x = _as_image_batch(x).unsqueeze(1)
        if features.shape[0] != x.shape[0] or features.shape[-2:] != x.shape[-2:]:
            raise ShapeMismatch(
                f"features {tuple(features.shape)} incompatible with pixels {tuple(x.shape)}"
            )
        if self.orientation == "column":
            raw = self._forward_rows(x.transpose(-1, -2), features.transpose(-1, -2))
            return self._to_field(raw.transpose(-1, -2))
        return self._to_field(self._forward_rows(x, features))

    @torch.no_grad()
    def sample(self, features, generator=None) -> torch.Tensor:
        """Draw an image pixel by pixel along the autoregressive axis.

        Row/column orientations generate all rows (columns) in parallel and
        evaluate each step on a window of ``extent + 1`` positions, which is
        exact because nothing further back is visible.
        """
        if self.orientation == "full":
            return self._sample_full(features, generator)
        feats = features.transpose(-1, -2) if self.orientation == "column" else features
        b, _, n, m = feats.shape
        x = torch.zeros((b, 1, n, m), dtype=feats.dtype, device=feats.device)
        for j in range(m):
            lo = max(0, j - self.extent)
            raw = self._forward_rows(x[..., lo : j + 1], feats[..., lo : j + 1])
            field = self._to_field(raw[..., -1:])
            x[..., j : j + 1] = gmm_sample(field, generator).unsqueeze(1)
        x = x[:, 0]
        return x.transpose(-1, -2) if self.orientation == "column" else x

    def _sample_full(self, features, generator):
        b, _, n, m = features.shape
        x = torch.zeros((b, 1, n, m), dtype=features.dtype, device=features.device)
        for i in range(n):
            for j in range(m):
                field = self._to_field(self._forward_rows(x, features)[..., i : i + 1, j : j + 1])
                x[..., i : i + 1, j : j + 1] = gmm_sample(field, generator).unsqueeze(1)
        return x[:, 0]


def verify_receptive_field(decoder: ARDecoder, features, pixel, threshold=0.0, x=None):
    """Pixels whose value influences any mixture parameter at ``pixel``.

    Computed by differentiating each of the 3K parameters at ``pixel`` with
    respect to the input image. ``features`` has shape (1, C, H, W).
    """
    i, j = pixel
    _, _, n, m = features.shape
    if not (0 <= i < n and 0 <= j < m):
        raise IndexOutOfRange(f"pixel {pixel} outside image of size {(n, m)}")
    if x is None:
        gen = rng_mod.make_generator(0)
        x = torch.randn((1, n, m), generator=gen, dtype=features.dtype)
    x = x.detach().clone().requires_grad_(True)
    field = decoder(x, features.detach())
    outputs = torch.cat([field.logits, field.means, field.log_scales], dim=1)[0, :, i, j]
    mask = torch.zeros((n, m), dtype=torch.bool)
    for value in outputs:
        (grad,) = torch.autograd.grad(value, x, retain_graph=True, allow_unused=True)
        if grad is not None:
            mask |= grad[0].abs() > threshold
    return mask.numpy()
