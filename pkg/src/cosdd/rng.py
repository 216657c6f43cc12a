"""Random streams for model sampling.

Stochastic model functions accept ``generator`` as ``None`` (global torch
RNG), a single :class:`torch.Generator`, or a sequence with one generator per
batch element. Per-element streams make draws independent of how a batch is
split, which is what gradient accumulation and tiled inference rely on.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np
import torch

Streams = Union[None, torch.Generator, Sequence[torch.Generator]]


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def per_item_generators(seed_or_rng, n: int) -> list[torch.Generator]:
    """Derive ``n`` independent generators from a seed or numpy Generator."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    return [make_generator(s) for s in rng.integers(0, 2**62, size=n)]


def randn(shape, generator: Streams = None, *, dtype=None, device=None) -> torch.Tensor:
    dtype = dtype or torch.get_default_dtype()
    if generator is None or isinstance(generator, torch.Generator):
        return torch.randn(shape, generator=generator, dtype=dtype, device=device)
    if len(generator) != shape[0]:
        raise ValueError(f"got {len(generator)} streams for batch of {shape[0]}")
    return torch.stack(
        [torch.randn(shape[1:], generator=g, dtype=dtype, device=device) for g in generator]
    )


def rand(shape, generator: Streams = None, *, dtype=None, device=None) -> torch.Tensor:
    dtype = dtype or torch.get_default_dtype()
    if generator is None or isinstance(generator, torch.Generator):
        return torch.rand(shape, generator=generator, dtype=dtype, device=device)
    if len(generator) != shape[0]:
        raise ValueError(f"got {len(generator)} streams for batch of {shape[0]}")
    return torch.stack(
        [torch.rand(shape[1:], generator=g, dtype=dtype, device=device) for g in generator]
    )
