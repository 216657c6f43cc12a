import numpy as np
import pytest
import torch

from cosdd.inference import (
    DenoiseRequest,
    TrainedModel,
    ar_mean_signal,
    denoise,
    encode,
    receptive_radius,
    resample_noisy,
    sample_solutions,
)
from cosdd.data import NormStats
from cosdd.model import Denoiser
from cosdd import rng as rng_mod

from conftest import tiny_config


@pytest.fixture
def untrained():
    torch.manual_seed(0)
    return TrainedModel(Denoiser(tiny_config()).double().eval(), NormStats(0.5, 2.0))


def image(size=(16, 16), seed=0):
    return np.random.default_rng(seed).normal(0.5, 2.0, size)


def test_single_sample_is_deterministic_and_shape_preserving(untrained):
    for shape in [(16, 16), (15, 21)]:
        img = image(shape)
        a = denoise(DenoiseRequest(img, n_samples=1, seed=3), untrained)
        b = denoise(DenoiseRequest(img, n_samples=1, seed=3), untrained)
        assert a.shape == shape
        assert np.array_equal(a, b)


def test_chunking_does_not_change_the_estimate(untrained):
    img = image()
    a = denoise(DenoiseRequest(img, n_samples=30, chunk=7), untrained)
    b = denoise(DenoiseRequest(img, n_samples=30, chunk=30), untrained)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_request_validation():
    with pytest.raises(ValueError):
        DenoiseRequest(image(), n_samples=0)
    with pytest.raises(ValueError):
        DenoiseRequest(image(), chunk=0)


def test_sample_spread_shrinks_like_one_over_sqrt_n(toy_trained):
    models, _, noisy = toy_trained
    img = noisy[0]
    singles = np.stack([denoise(DenoiseRequest(img, n_samples=1, seed=1000 + k), models) for k in range(12)])
    means = np.stack(
        [denoise(DenoiseRequest(img, n_samples=100, seed=2000 + 100 * k), models) for k in range(12)]
    )
    ratio = np.median(means.std(axis=0) / singles.std(axis=0))
    assert 0.05 < ratio < 0.2


def test_single_solution_equals_single_sample_denoise(untrained):
    img = image()
    (only,) = sample_solutions(img, 1, untrained, seed=4)
    np.testing.assert_array_equal(only, denoise(DenoiseRequest(img, n_samples=1, seed=4), untrained))


def test_solution_mean_equals_denoised_estimate(toy_trained):
    models, _, noisy = toy_trained
    samples = sample_solutions(noisy[1], 100, models, seed=8)
    estimate = denoise(DenoiseRequest(noisy[1], n_samples=100, seed=8), models)
    assert np.abs(np.mean(samples, axis=0) - estimate).max() < 1e-6


def test_solutions_differ_across_seeds(toy_trained):
    models, _, noisy = toy_trained
    (a,) = sample_solutions(noisy[2], 1, models, seed=1)
    (b,) = sample_solutions(noisy[2], 1, models, seed=2)
    assert not np.allclose(a, b)


def test_resample_noisy_shape_and_seed(untrained):
    img = image((16, 20))
    a = resample_noisy(img, untrained, seed=5)
    b, signal = resample_noisy(img, untrained, seed=5, return_signal=True)
    assert a.shape == img.shape == signal.shape
    assert np.array_equal(a, b)
    assert not np.array_equal(a, resample_noisy(img, untrained, seed=6))


def test_ar_mean_of_one_sample_is_that_sample(untrained):
    latents, _ = encode(image(), untrained, seed=0)
    expected = untrained.model.ar.sample(latents.features[:1], rng_mod.make_generator(11))[0]
    got = ar_mean_signal(latents, untrained, 1, seed=11)
    np.testing.assert_allclose(got, untrained.norm_stats.denormalize(expected.numpy()), atol=1e-12)
    with pytest.raises(ValueError):
        ar_mean_signal(latents, untrained, 0)


def test_ar_mean_spread_follows_inverse_sqrt_law(toy_trained):
    models, _, noisy = toy_trained
    latents, _ = encode(noisy[0][:8, :8], models, seed=0)
    spread = {}
    for L in (10, 1000):
        estimates = np.stack([ar_mean_signal(latents, models, L, seed=s) for s in range(8)])
        spread[L] = np.median(estimates.std(axis=0))
    # sqrt(1000 / 10) = 10
    assert 5 < spread[10] / spread[1000] < 20


def test_reported_standard_error_matches_sample_spread(toy_trained):
    models, _, noisy = toy_trained
    latents, _ = encode(noisy[0][:8, :8], models, seed=0)
    _, se = ar_mean_signal(latents, models, 400, seed=0, return_std=True)
    estimates = np.stack([ar_mean_signal(latents, models, 400, seed=s) for s in range(1, 9)])
    assert 0.5 < np.median(estimates.std(axis=0, ddof=1)) / np.median(se) < 2


def _full_probe_radius(model):
    """Square gradient probe on the model itself, ReLU dead zones aside."""
    probe = Denoiser(model.config).double().eval()
    gen = torch.Generator().manual_seed(1)
    for module in probe.modules():
        if isinstance(module, (torch.nn.Conv2d, torch.nn.ConvTranspose2d)):
            with torch.no_grad():
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen, dtype=torch.float64) * 0.5)
    size = 128
    x = torch.randn((1, 1, size, size), dtype=torch.float64, requires_grad=True)
    eps = probe.vae.draw_eps(1, size, size, rng_mod.make_generator(0), dtype=torch.float64)
    out = probe.signal(probe.vae(x, eps=eps).features, stop_gradient=False)
    c = size // 2
    (grad,) = torch.autograd.grad(out[0, c - 2 : c + 3, c - 2 : c + 3].sum(), x)
    rows, cols = np.nonzero(grad[0, 0].numpy())
    return int(max(np.abs(rows - c).max(), np.abs(cols - c).max())) - 2


@pytest.mark.parametrize("levels", [2, 3])
def test_receptive_radius_covers_square_probe(levels):
    model = Denoiser(tiny_config(levels=levels))
    radius = receptive_radius(model)
    full = _full_probe_radius(model)
    assert full <= radius <= full + model.config.hierarchy.total_factor + 2


def test_tiled_matches_untiled_interior(untrained):
    img = image((96, 96), seed=3)
    overlap = receptive_radius(untrained.model)
    whole = denoise(DenoiseRequest(img, n_samples=4, seed=0), untrained)
    tiled = denoise(DenoiseRequest(img, n_samples=4, seed=0, tile=2 * overlap + 8, overlap=overlap), untrained)
    assert np.abs(whole - tiled).max() < 1e-3


def test_tile_overlap_below_ar_extent_rejected(untrained):
    with pytest.raises(ValueError, match="receptive field"):
        denoise(DenoiseRequest(image((64, 64)), n_samples=1, tile=32, overlap=2), untrained)


def test_clip_bounds_the_estimate(untrained):
    img = image()
    out = denoise(DenoiseRequest(img, n_samples=2, clip=True), untrained)
    assert out.min() >= img.min() and out.max() <= img.max()


def _ar_vs_head(models, image, L):
    latents, _ = encode(image, models, seed=0)
    with torch.no_grad():
        head = models.norm_stats.denormalize(models.model.predict_signal(latents)[0].double().numpy())
    mean, se = ar_mean_signal(latents, models, L, seed=0, return_std=True)
    return mean, se, head


def test_ar_average_moves_toward_signal_head_as_L_grows(toy_trained):
    models, _, noisy = toy_trained
    gaps = {}
    for L in (100, 10_000):
        mean, _, head = _ar_vs_head(models, noisy[0], L)
        gaps[L] = np.sqrt(np.mean((mean - head) ** 2))
    assert gaps[10_000] < gaps[100]


@pytest.mark.xfail(strict=True, reason="the toy model's AR mean and signal head differ by a bias far above Monte-Carlo error")
def test_ar_average_of_ten_thousand_matches_signal_head(toy_trained):
    models, _, noisy = toy_trained
    mean, se, head = _ar_vs_head(models, noisy[0], 10_000)
    assert np.all(np.abs(mean - head) <= 3 * se)
