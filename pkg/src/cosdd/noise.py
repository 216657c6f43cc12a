"""Synthetic corruptions: stripe, checkerboard and pixel-independent noise.

All generators take a clean image ``s`` and a :class:`numpy.random.Generator`
and return the noisy image ``x``. Every recipe is zero-centred, E[x | s] = s.
"""

from __future__ import annotations

import dataclasses
from typing import Literal

import numpy as np
from scipy import ndimage

from cosdd.errors import NegativeSignalForPoisson, OutOfRangeSignal


@dataclasses.dataclass(frozen=True)
class StripeNoiseParams:
    poisson_scale: float = 0.002
    awg_std: float = 0.02
    stripe_std: float = 0.025
    blur_std: float = 1.0
    blur_axis: Literal["horizontal", "vertical"] = "horizontal"

    def __post_init__(self):
        for name in ("poisson_scale", "awg_std", "stripe_std", "blur_std"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.blur_axis not in ("horizontal", "vertical"):
            raise ValueError(f"unknown blur_axis {self.blur_axis!r}")


@dataclasses.dataclass(frozen=True)
class CheckerboardNoiseParams:
    dep_coeff: float = 0.15
    pattern_amp: float = 0.1
    run_length: int = 2
    axis: Literal["vertical"] = "vertical"
    s_floor: float = 0.05
    # how dep_coeff / s is read: as the variance (default) or the std of the Gaussian term
    dep_is_variance: bool = True
    # False removes the signal-dependent Gaussian term entirely
    signal_noise: bool = True

    def __post_init__(self):
        if not self.dep_coeff > 0:
            raise ValueError("dep_coeff must be positive")
        if self.pattern_amp < 0:
            raise ValueError("pattern_amp must be non-negative")
        if self.run_length < 1:
            raise ValueError("run_length must be >= 1")
        if self.axis != "vertical":
            raise ValueError("only the vertical checkerboard axis is supported")
        if not self.s_floor > 0:
            raise ValueError("s_floor must be positive")


def _check_unit_range(s):
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise OutOfRangeSignal("signal contains non-finite values")
    if s.min(initial=0.0) < 0 or s.max(initial=0.0) > 1:
        raise OutOfRangeSignal(
            f"signal must lie in [0, 1], got range [{s.min()}, {s.max()}]"
        )
    return s


def poisson_component(s, scale, rng):
    """``scale * Poisson(s / scale)``; mean s, variance ``scale * s``."""
    return scale * rng.poisson(np.asarray(s) / scale).astype(np.float64)


def stripe_component(shape, params: StripeNoiseParams, rng):
    """White Gaussian noise blurred along one axis."""
    white = rng.normal(0.0, params.stripe_std, size=shape)
    axis = 1 if params.blur_axis == "horizontal" else 0
    return ndimage.gaussian_filter1d(
        white, sigma=params.blur_std, axis=axis, mode="reflect", truncate=4.0
    )


def apply_stripe_noise(s, params: StripeNoiseParams | None = None, rng=None):
    """Poisson shot noise, white read noise and axis-blurred Gaussian noise."""
    params = params or StripeNoiseParams()
    rng = rng if rng is not None else np.random.default_rng()
    s = _check_unit_range(s)
    x = poisson_component(s, params.poisson_scale, rng)
    x = x + rng.normal(0.0, params.awg_std, size=s.shape)
    return x + stripe_component(s.shape, params, rng)


def checkerboard_pattern(n_rows, amp, run_length, phase):
    """Per-row offsets ``-amp`` x run_length then ``+amp`` x run_length, repeating."""
    period = 2 * run_length
    rows = (np.arange(n_rows) + phase) % period
    return np.where(rows < run_length, -amp, amp).astype(np.float64)


def checkerboard_gaussian_std(s, params: CheckerboardNoiseParams):
    level = params.dep_coeff / np.maximum(s, params.s_floor)
    return np.sqrt(level) if params.dep_is_variance else level


def apply_checkerboard_noise(
    s, params: CheckerboardNoiseParams | None = None, rng=None, *, phase=None
):
    """Inverse signal-dependent Gaussian noise plus a vertical two-level pattern.

    The pattern phase is drawn uniformly from ``0 .. 2 * run_length - 1`` per
    image unless ``phase`` is given.
    """
    params = params or CheckerboardNoiseParams()
    rng = rng if rng is not None else np.random.default_rng()
    s = _check_unit_range(s)
    if phase is None:
        phase = int(rng.integers(0, 2 * params.run_length))
    x = s.copy()
    if params.signal_noise:
        x = x + rng.normal(size=s.shape) * checkerboard_gaussian_std(s, params)
    pattern = checkerboard_pattern(s.shape[0], params.pattern_amp, params.run_length, phase)
    return x + pattern[:, None]


def apply_iid_noise(s, kind="awg", *, std=0.1, gain=1.0, rng=None):
    """Pixel-independent noise.

    ``awg`` adds N(0, std^2); ``poisson`` draws ``gain * Poisson(s / gain)``;
    ``poisson-gaussian`` is the Poisson draw plus N(0, std^2).
    """
    rng = rng if rng is not None else np.random.default_rng()
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise OutOfRangeSignal("signal contains non-finite values")
    if kind == "awg":
        if std == 0:
            return s.copy()
        return s + rng.normal(0.0, std, size=s.shape)
    if kind in ("poisson", "poisson-gaussian"):
        if np.any(s < 0):
            raise NegativeSignalForPoisson("Poisson noise requires a non-negative signal")
        x = poisson_component(s, gain, rng)
        if kind == "poisson-gaussian" and std > 0:
            x = x + rng.normal(0.0, std, size=s.shape)
        return x
    raise ValueError(f"unknown iid noise kind {kind!r}")


def to_grayscale(image):
    """Average colour channels (last axis) of an RGB(A) array."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[-1] == 4:
        image = image[..., :3]
    return image.mean(axis=-1)


def rescale_unit(image):
    lo, hi = float(np.min(image)), float(np.max(image))
    if hi == lo:
        return np.zeros_like(image, dtype=np.float64)
    return (np.asarray(image, dtype=np.float64) - lo) / (hi - lo)


def procedural_textures(n, size=64, rng=None):
    """Grayscale images in [0, 1] with structure at several spatial scales.

    Each image sums smoothed Gaussian fields at three scales with a few
    soft-edged discs and bars, then is min-max scaled.
    """
    rng = rng if rng is not None else np.random.default_rng()
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = []
    for _ in range(n):
        img = np.zeros((size, size))
        for sigma, weight in ((size / 6, 1.0), (size / 16, 0.6), (size / 40, 0.3)):
            field = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
            img += weight * field / (field.std() + 1e-12)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, size, 2)
            radius = rng.uniform(size / 12, size / 4)
            dist = np.hypot(yy - cy, xx - cx)
            img += rng.choice([-1.5, 1.5]) / (1 + np.exp((dist - radius) / 1.0))
        if rng.random() < 0.5:
            angle = rng.uniform(0, np.pi)
            proj = (xx - size / 2) * np.cos(angle) + (yy - size / 2) * np.sin(angle)
            img += 1.0 * (np.abs(proj - rng.uniform(-size / 4, size / 4)) < rng.uniform(2, 6))
        out.append(rescale_unit(img))
    return out


RECIPES = ("stripe", "checkerboard", "awg", "poisson")


def apply_recipe(s, recipe, params=None, rng=None):
    if recipe == "stripe":
        return apply_stripe_noise(s, params, rng)
    if recipe == "checkerboard":
        return apply_checkerboard_noise(s, params, rng)
    if recipe in ("awg", "poisson", "poisson-gaussian"):
        return apply_iid_noise(s, recipe, rng=rng, **(params or {}))
    raise ValueError(f"unknown recipe {recipe!r}")
