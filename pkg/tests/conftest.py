import numpy as np
import pytest
import torch

from cosdd.ar_decoder import ARDecoderConfig, ReceptiveFieldSpec
from cosdd.ladder import HierarchyConfig
from cosdd.model import Denoiser, ModelConfig
from cosdd.signal_decoder import SignalDecoderConfig


def tiny_config(orientation="row", length=4, levels=2, hidden=8, components=2, batch_norm=True):
    """A few-thousand-parameter model that runs in milliseconds on CPU."""
    return ModelConfig(
        HierarchyConfig(n_levels=levels, latent_dims=(4,) * levels, hidden=hidden, batch_norm=batch_norm),
        ARDecoderConfig(n_blocks=2, filters=8, n_components=components,
                        rf=ReceptiveFieldSpec(orientation, length)),
        SignalDecoderConfig(filters=8),
    )


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return Denoiser(tiny_config()).double().eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_trained():
    """Tiny model fitted for 300 steps to checkerboard-noise textures."""
    from cosdd.data import NormStats
    from cosdd.inference import TrainedModel
    from cosdd.noise import apply_checkerboard_noise, procedural_textures
    from cosdd.rng import per_item_generators
    from cosdd.trainer import TrainConfig, make_optimizers, training_step

    gen = np.random.default_rng(0)
    clean = procedural_textures(16, 16, gen)
    noisy = np.stack([apply_checkerboard_noise(s, rng=gen) for s in clean])
    stats = NormStats(float(noisy.mean()), float(noisy.std()))
    x = torch.as_tensor(stats.normalize(noisy), dtype=torch.float64)[:, None]
    torch.manual_seed(0)
    model = Denoiser(tiny_config(orientation="column")).double()
    optimizers = make_optimizers(model, 2e-3)
    config = TrainConfig(batch_size=16, virtual_batches=1)
    for _ in range(300):
        training_step(model, x, optimizers, per_item_generators(gen, 16), config)
    return TrainedModel(model.eval(), stats, step=300), clean, noisy


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
