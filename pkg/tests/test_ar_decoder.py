import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cosdd.ar_decoder import (
    ARDecoder,
    ARDecoderConfig,
    MixtureField,
    ReceptiveFieldSpec,
    causal_context,
    gmm_log_prob,
    gmm_sample,
    layer_plan,
    verify_receptive_field,
)
from cosdd.errors import IndexOutOfRange, ShapeMismatch
from cosdd.rng import make_generator

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def decoder(orientation="row", length=8, components=3, filters=8, cond=4, seed=0):
    torch.manual_seed(seed)
    config = ARDecoderConfig(filters=filters, n_components=components, rf=ReceptiveFieldSpec(orientation, length))
    return ARDecoder(config, cond_channels=cond).double().eval()


def features(h, w, c=4, seed=1):
    return torch.randn((1, c, h, w), generator=make_generator(seed), dtype=torch.float64)


def field(logits, means, log_scales):
    as_t = lambda v: torch.tensor(v, dtype=torch.float64).reshape(1, -1, 1, 1)  # noqa: E731
    return MixtureField(as_t(logits), as_t(means), as_t(log_scales))


# causal context ------------------------------------------------------------


def test_causal_context_examples():
    row3 = ReceptiveFieldSpec("row", 3)
    assert causal_context(row3, (5, 0), (8, 8)) == []
    assert causal_context(row3, (2, 5), (8, 8)) == [(2, 2), (2, 3), (2, 4)]
    full = ReceptiveFieldSpec("full", None)
    assert causal_context(full, (1, 2), (3, 4)) == [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1)]
    assert causal_context(ReceptiveFieldSpec("column", 2), (3, 1), (8, 8)) == [(1, 1), (2, 1)]
    with pytest.raises(IndexOutOfRange):
        causal_context(row3, (8, 0), (8, 8))


def test_spec_validation():
    with pytest.raises(ValueError):
        ReceptiveFieldSpec("row", None)
    with pytest.raises(ValueError):
        ReceptiveFieldSpec("diagonal", 3)


@pytest.mark.parametrize(
    "length, expected",
    [(40, (2, [1, 2, 1, 4, 1, 8, 1, 1])), (16, (2, [1, 2, 1, 2, 1, 0, 0, 0])), (1, (1, [0] * 8))],
)
def test_layer_plan_examples(length, expected):
    assert layer_plan(length, 8) == expected


@given(length=st.integers(1, 200), blocks=st.integers(1, 10), kernel=st.integers(2, 5))
def test_layer_plan_extent_is_exact(length, blocks, kernel):
    first, dilations = layer_plan(length, blocks, kernel)
    assert first >= 1 and all(d >= 0 for d in dilations)
    assert first + (kernel - 1) * sum(dilations) == length


# likelihood ----------------------------------------------------------------


def test_standard_normal_log_density():
    per_pixel, total = gmm_log_prob(field([0.0], [0.0], [0.0]), torch.zeros(1, 1, 1, dtype=torch.float64))
    assert abs(per_pixel.item() + 0.918939) < 1e-6
    assert abs(total.item() + HALF_LOG_2PI) < 1e-12


def test_duplicate_components_change_nothing():
    x = torch.full((1, 1, 1), 0.37, dtype=torch.float64)
    one, _ = gmm_log_prob(field([0.0], [0.2], [-0.3]), x)
    two, _ = gmm_log_prob(field([1.5, 1.5], [0.2, 0.2], [-0.3, -0.3]), x)
    assert torch.allclose(one, two, atol=1e-14)


def test_symmetric_two_component_mixture():
    value, _ = gmm_log_prob(field([0.0, 0.0], [-1.0, 1.0], [0.0, 0.0]), torch.zeros(1, 1, 1, dtype=torch.float64))
    assert abs(value.item() - math.log(math.exp(-0.5) / math.sqrt(2 * math.pi))) < 1e-12
    assert abs(value.item() + 1.418939) < 1e-6


def test_log_prob_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        gmm_log_prob(field([0.0], [0.0], [0.0]), torch.zeros(1, 2, 2, dtype=torch.float64))


def test_log_scales_are_clamped():
    f = field([0.0], [0.0], [-50.0])
    assert f.log_scales.item() == -7.0


def _direct_density(logits, means, scales, x):
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return sum(
        wk * np.exp(-0.5 * ((x - m) / s) ** 2) / (s * np.sqrt(2 * np.pi)) for wk, m, s in zip(w, means, scales)
    )


def test_density_integrates_to_one():
    gen = np.random.default_rng(0)
    grid = np.arange(-20.0, 20.0 + 5e-4, 1e-3)
    for _ in range(20):
        logits = gen.normal(size=3)
        means = gen.uniform(-5, 5, size=3)
        log_scales = gen.uniform(-2, 1.5, size=3)
        f = field(logits, means, log_scales)
        x = torch.tensor(grid, dtype=torch.float64).reshape(1, 1, -1)
        wide = MixtureField(*(t.expand(-1, -1, 1, grid.size) for t in (f.logits, f.means, f.log_scales)))
        lp, _ = gmm_log_prob(wide, x)
        density = np.exp(lp.numpy().ravel())
        np.testing.assert_allclose(density, _direct_density(logits, means, np.exp(log_scales), grid), rtol=1e-8, atol=1e-300)
        assert abs(np.trapezoid(density, grid) - 1) < 1e-3


# sampling ------------------------------------------------------------------


def test_gmm_sample_moments():
    f = field([0.0, math.log(3.0)], [-2.0, 1.0], [math.log(0.5), math.log(0.25)])
    wide = MixtureField(*(t.expand(-1, -1, 200, 500) for t in (f.logits, f.means, f.log_scales)))
    x = gmm_sample(wide, make_generator(0)).numpy()
    mean = 0.25 * -2 + 0.75 * 1
    var = 0.25 * (0.25 + 4) + 0.75 * (0.0625 + 1) - mean**2
    n = x.size
    assert abs(x.mean() - mean) < 4 * math.sqrt(var / n)
    assert abs(x.var() / var - 1) < 0.02


def test_sampling_is_seeded():
    dec = decoder()
    feats = features(4, 12)
    a = dec.sample(feats, make_generator(3))
    b = dec.sample(feats, make_generator(3))
    assert torch.equal(a, b)
    assert not torch.equal(a, dec.sample(feats, make_generator(4)))


def _pin_head(dec, mean, log_scale):
    """Make the decoder emit one fixed component everywhere."""
    last = dec.head[-1]
    k = dec.config.n_components
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
        last.bias[k : 2 * k] = mean
        last.bias[2 * k :] = log_scale


def test_vanishing_scale_sample_equals_mean_field():
    dec = decoder(components=1)
    _pin_head(dec, 0.3, -7.0)
    feats = features(6, 20)
    x = dec.sample(feats, make_generator(0))
    mean_field = dec(x, feats).mean()
    # std is exp(-7) ~ 9.1e-4; the RMS deviation is below 1e-3
    assert ((x - mean_field) ** 2).mean().sqrt().item() < 1e-3


@pytest.mark.parametrize("orientation", ["row", "column"])
def test_windowed_sampling_matches_teacher_forcing(orientation):
    """Reference sampler: full-width teacher-forced pass before every pixel."""
    dec = decoder(orientation, length=5)
    feats = features(7, 9)
    fast = dec.sample(feats, make_generator(0))

    gen = make_generator(0)
    x = torch.zeros((1, 7, 9), dtype=torch.float64)
    steps = 9 if orientation == "row" else 7
    with torch.no_grad():
        for j in range(steps):
            f = dec(x, feats)
            if orientation == "column":
                f = f.transpose()
            col = MixtureField(f.logits[..., j : j + 1], f.means[..., j : j + 1], f.log_scales[..., j : j + 1])
            draw = gmm_sample(col, gen)
            if orientation == "row":
                x[..., j : j + 1] = draw
            else:
                x[:, j : j + 1, :] = draw.transpose(-1, -2)
    torch.testing.assert_close(fast, x, rtol=0, atol=1e-10)


def _row_profiles(image, max_lag=3):
    """Lag-1..max_lag autocorrelation along every row, shape (rows, max_lag)."""
    return np.array([
        [np.corrcoef(row[:-d], row[d:])[0, 1] for d in range(1, max_lag + 1)] for row in image
    ])


def test_same_latent_samples_share_noise_statistics():
    dec = decoder(length=8)
    feats = features(64, 256, seed=2)
    a = dec.sample(feats, make_generator(10))[0].numpy()
    b = dec.sample(feats, make_generator(11))[0].numpy()
    assert np.abs(a - b).max() > 0
    pa, pb = _row_profiles(a), _row_profiles(b)
    # rows are conditionally independent, so row-to-row spread gives the error bar
    se = np.sqrt((pa.var(axis=0, ddof=1) + pb.var(axis=0, ddof=1)) / len(pa))
    assert np.all(np.abs(pa.mean(axis=0) - pb.mean(axis=0)) < 4 * se)


def test_sampled_loglik_matches_expected_loglik():
    """E[log p(x)] over samples equals the summed per-pixel negative entropies.

    By the tower rule each pixel's log-density, averaged over draws from its
    own conditional, equals that conditional's negative entropy; entropies are
    evaluated by quadrature.
    """
    dec = decoder(length=4, components=2)
    feats = features(4, 8, seed=3)
    grid = torch.arange(-20.0, 20.0, 1e-3, dtype=torch.float64)
    diffs = []
    for seed in range(60):
        x = dec.sample(feats, make_generator(seed))
        f = dec(x, feats)
        lp, total = gmm_log_prob(f, x)
        assert torch.isfinite(total)
        logits, means, log_scales = (t[0].reshape(t.shape[1], -1) for t in (f.logits, f.means, f.log_scales))
        log_w = torch.log_softmax(logits, dim=0)
        z = (grid[None, None, :] - means[..., None]) / torch.exp(log_scales)[..., None]
        comp = -0.5 * z**2 - log_scales[..., None] - HALF_LOG_2PI
        logp = torch.logsumexp(log_w[..., None] + comp, dim=0)
        neg_entropy = torch.trapezoid(torch.exp(logp) * logp, grid, dim=-1).sum()
        diffs.append((total - neg_entropy).item())
    diffs = np.array(diffs)
    assert abs(diffs.mean()) < 3 * diffs.std(ddof=1) / math.sqrt(len(diffs))


# causality -----------------------------------------------------------------


def test_row_length_40_mask_spans_previous_40_columns():
    dec = decoder(length=40)
    mask = verify_receptive_field(dec, features(16, 128), (10, 100))
    expected = np.zeros((16, 128), dtype=bool)
    expected[10, 60:100] = True
    np.testing.assert_array_equal(mask, expected)


def test_first_pixel_has_empty_mask():
    dec = decoder(length=8)
    assert not verify_receptive_field(dec, features(8, 16), (3, 0)).any()


def test_full_mask_within_predecessors_and_reaches_previous_row():
    dec = decoder("full", None)
    mask = verify_receptive_field(dec, features(6, 8), (1, 2))
    allowed = np.zeros_like(mask)
    for u, v in causal_context(ReceptiveFieldSpec("full", None), (1, 2), (6, 8)):
        allowed[u, v] = True
    assert not (mask & ~allowed).any()
    assert mask[0].any()


@settings(max_examples=25, deadline=None)
@given(
    orientation=st.sampled_from(["row", "column"]),
    length=st.integers(1, 12),
    i=st.integers(0, 11),
    j=st.integers(0, 15),
)
def test_mask_inside_causal_context(orientation, length, i, j):
    dec = decoder(orientation, length, seed=length)
    mask = verify_receptive_field(dec, features(12, 16), (i, j))
    allowed = np.zeros_like(mask)
    for u, v in causal_context(dec.config.rf, (i, j), (12, 16)):
        allowed[u, v] = True
    assert not (mask & ~allowed).any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_perturbations_respect_row_causality(seed):
    dec = decoder(length=6, seed=seed)
    feats = features(8, 20, seed=seed)
    x = torch.randn((1, 8, 20), generator=make_generator(seed), dtype=torch.float64)
    base = dec(x, feats)
    i, j = 4, 10

    def params(f):
        return torch.cat([f.logits, f.means, f.log_scales], dim=1)[0]

    ahead = x.clone()
    ahead[0, i, j + 1] += 1.0
    assert torch.allclose(params(dec(ahead, feats))[:, i, j], params(base)[:, i, j], atol=1e-6)

    other = x.clone()
    other[0, i + 1, :] += torch.randn(20, dtype=torch.float64)
    assert torch.allclose(params(dec(other, feats))[:, i], params(base)[:, i], atol=1e-6)

    behind = x.clone()
    behind[0, i, j - 1] += 1.0
    assert (params(dec(behind, feats))[:, i, j] - params(base)[:, i, j]).abs().max() > 1e-6


def test_row_likelihood_invariant_to_other_rows():
    dec = decoder(length=6)
    feats = features(8, 20)
    x = torch.randn((1, 8, 20), generator=make_generator(5), dtype=torch.float64)
    y = x.clone()
    y[0, [0, 1, 2, 4, 5, 6, 7]] = torch.randn((7, 20), generator=make_generator(6), dtype=torch.float64) * 5
    lx, _ = gmm_log_prob(dec(x, feats), x)
    ly, _ = gmm_log_prob(dec(y, feats), y)
    assert (lx[0, 3] - ly[0, 3]).abs().max().item() < 1e-6


def test_pixel_outside_image_rejected():
    with pytest.raises(IndexOutOfRange):
        verify_receptive_field(decoder(), features(4, 4), (4, 0))
