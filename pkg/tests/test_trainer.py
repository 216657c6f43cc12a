import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cosdd.ar_decoder import MixtureField
from cosdd.data import ImageStack
from cosdd.errors import NonFiniteLoss
from cosdd.model import Denoiser
from cosdd.noise import apply_checkerboard_noise, procedural_textures
from cosdd.rng import make_generator, per_item_generators
from cosdd.trainer import (
    METRIC_COLUMNS,
    PlateauSchedule,
    TrainConfig,
    elbo,
    fit,
    make_optimizers,
    training_step,
)

from conftest import tiny_config


def fresh_model(seed=0, **kw):
    torch.manual_seed(seed)
    return Denoiser(tiny_config(**kw)).double()


def batch(n=4, size=16, seed=0):
    return torch.randn((n, 1, size, size), generator=make_generator(seed), dtype=torch.float64)


def toy_stack(n, size=32, seed=0):
    gen = np.random.default_rng(seed)
    clean = procedural_textures(n, size, gen)
    return ImageStack.from_arrays([apply_checkerboard_noise(s, rng=gen) for s in clean])


def test_fresh_model_kl_zero_and_finite():
    terms, objective = elbo(fresh_model(), batch(), make_generator(0))
    assert terms.is_finite() and torch.isfinite(objective)
    terms = terms.as_floats()
    assert abs(terms.kl_nats) < 1e-6
    assert terms.elbo_nats == pytest.approx(terms.recon_nats + terms.kl_nats)


def test_unit_gaussian_at_data_gives_half_log_two_pi(monkeypatch):
    model = fresh_model(components=1)

    def centred_field(x, features):
        x = x[:, None] if x.dim() == 3 else x
        zeros = torch.zeros_like(x)
        return MixtureField(zeros, x, zeros)

    monkeypatch.setattr(model.ar, "forward", centred_field)
    terms = elbo(model, batch(), make_generator(0))[0].as_floats()
    assert terms.recon_nats == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 10))
def test_elbo_at_least_recon(seed, scale):
    model = fresh_model()
    with torch.no_grad():
        for net in model.vae.posterior_nets:
            net.bias.uniform_(-1, 1, generator=make_generator(seed))
    terms = elbo(model, batch(seed=seed) * scale, make_generator(seed))[0].as_floats()
    assert terms.elbo_nats >= terms.recon_nats


def test_zero_lr_update_leaves_parameters_bitwise():
    model = fresh_model()
    before = {k: v.clone() for k, v in model.state_dict().items() if v.is_floating_point()}
    optimizers = make_optimizers(model, 0.0)
    training_step(model, batch(), optimizers, per_item_generators(0, 4), TrainConfig(virtual_batches=1, batch_size=4))
    for name, param in model.named_parameters():
        assert torch.equal(param, before[name]), name


def test_signal_only_step_leaves_vae_untouched():
    model = fresh_model()
    vae_before = [p.clone() for p in model.vae_parameters()]
    signal_before = [p.clone() for p in model.signal_parameters()]
    config = TrainConfig(virtual_batches=2, batch_size=4)
    optimizers = make_optimizers(model, 1e-2)
    training_step(model, batch(), optimizers, per_item_generators(0, 4), config, train_vae=False)
    for p, q in zip(model.vae_parameters(), vae_before):
        assert torch.equal(p, q)
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    assert any(not torch.equal(p, q) for p, q in zip(model.signal_parameters(), signal_before))


def test_non_finite_batch_raises_without_update():
    model = fresh_model()
    before = [p.clone() for p in model.parameters()]
    x = batch()
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLoss):
        training_step(model, x, make_optimizers(model, 1e-2), per_item_generators(0, 4),
                      TrainConfig(virtual_batches=1, batch_size=4))
    assert all(torch.equal(p, q) for p, q in zip(model.parameters(), before))
    assert all(p.grad is None for p in model.parameters())


def test_two_hundred_steps_reduce_the_loss():
    stack = toy_stack(8, size=16)
    images = torch.as_tensor(np.stack(stack.images), dtype=torch.float64)
    images = ((images - images.mean()) / images.std())[:, None]
    model = fresh_model(length=4, orientation="column")
    optimizers = make_optimizers(model, 2e-3)
    config = TrainConfig(batch_size=8, virtual_batches=1)
    gen = np.random.default_rng(0)
    losses = [
        float(training_step(model, images, optimizers, per_item_generators(gen, 8), config).elbo_nats)
        for _ in range(200)
    ]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=16, virtual_batches=3)


class _Opt:
    def __init__(self, lr):
        self.param_groups = [{"lr": lr}]


def test_plateau_arithmetic_is_exact():
    opts = [_Opt(0.002), _Opt(0.002)]
    schedule = PlateauSchedule(opts, patience=50, factor=10.0, stop_patience=100)
    schedule.start(1.0)
    for epoch in range(1, 101):
        schedule.update(1.0)
        if epoch == 49:
            assert schedule.lr == 0.002
        if epoch == 50:
            assert schedule.lr == 0.002 / 10 == 0.0002
            assert all(o.param_groups[0]["lr"] == 0.0002 for o in opts)
        assert schedule.should_stop == (epoch >= 100)
    assert schedule.lr == 0.002 / 10 / 10


def test_plateau_counter_resets_on_improvement():
    schedule = PlateauSchedule([_Opt(1.0)], patience=3, factor=2.0, stop_patience=5)
    schedule.start(10.0)
    for loss in (11, 11, 9, 11, 11):
        schedule.update(loss)
    assert schedule.lr == 1.0
    schedule.update(11)
    assert schedule.lr == 0.5


def test_fit_single_step(tmp_path):
    stack = toy_stack(6)
    train, val = ImageStack(stack.images[:4], stack.source_ids[:4]), ImageStack(stack.images[4:], stack.source_ids[4:])
    config = TrainConfig(max_steps=1, batch_size=2, virtual_batches=1, crop=16)
    ckpt = fit(train, val, config, tiny_config(), metrics_path=tmp_path / "m.csv", dtype=torch.float64)
    assert ckpt.step == 1
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS
    splits = [r[-1] for r in rows[1:]]
    assert splits.count("train") == 1 and splits.count("val") == 2


def test_fit_with_constant_validation_decays_then_stops():
    stack = toy_stack(3, size=16)
    train, val = ImageStack(stack.images[:2], stack.source_ids[:2]), ImageStack(stack.images[2:], stack.source_ids[2:])
    config = TrainConfig(max_steps=10_000, batch_size=2, virtual_batches=1, crop=16)
    lrs = []
    ckpt = fit(train, val, config, tiny_config(), val_loss_fn=lambda m: 1.0, dtype=torch.float64,
               progress=lambda line: lrs.append(float(line.rsplit("lr ", 1)[1])))
    # progress reports the lr in force during each epoch
    assert lrs[49] == 0.002 and lrs[50] == 0.0002
    assert ckpt.extra["epochs"] == 100
    assert ckpt.step == 1  # no epoch ever beat the baseline; the first snapshot is kept


def test_two_stage_training_keeps_best_step():
    stack = toy_stack(6, size=16)
    train, val = ImageStack(stack.images[:4], stack.source_ids[:4]), ImageStack(stack.images[4:], stack.source_ids[4:])
    config = TrainConfig(max_steps=2, batch_size=2, virtual_batches=1, crop=16, two_stage=True, signal_steps=3)
    ckpt = fit(train, val, config, tiny_config(), dtype=torch.float64)
    assert ckpt.step == 2
