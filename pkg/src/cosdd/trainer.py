"""Joint optimization of the VAE objective and the signal-decoder L2 loss."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from cosdd import rng as rng_mod
from cosdd.ar_decoder import gmm_log_prob
from cosdd.checkpoint import Checkpoint
from cosdd.data import CropSpec, ImageStack, NormStats, normalize_stack, random_crop
from cosdd.errors import NonFiniteLoss, NonFiniteStats
from cosdd.model import Denoiser, ModelConfig
from cosdd.signal_decoder import signal_loss

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "recon_nats", "kl_nats", "elbo_nats", "signal_mse", "lr", "split")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.002
    plateau_patience: int = 50
    decay_factor: float = 10.0
    max_steps: int = 80_000
    early_stop_patience: int = 100
    batch_size: int = 16
    virtual_batches: int = 4
    crop: int = 256
    seed: int = 0
    preset: str = "small"
    grad_clip: float = 100.0
    # nats per pixel per level below which KL is not penalized; 0 disables
    free_bits: float = 0.0
    max_nonfinite: int = 20
    val_fraction: float = 0.1
    two_stage: bool = False
    signal_steps: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.virtual_batches < 1 or self.batch_size % self.virtual_batches:
            raise ValueError("virtual_batches must divide batch_size")
        if self.decay_factor <= 1:
            raise ValueError("decay_factor must exceed 1")


@dataclasses.dataclass
class LossBreakdown:
    """Per-pixel losses in nats. ``elbo_nats`` is the negative ELBO (recon + KL)."""

    recon_nats: torch.Tensor | float
    kl_nats: torch.Tensor | float
    elbo_nats: torch.Tensor | float
    signal_mse: torch.Tensor | float
    step: int = 0

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(*_term_array(self).tolist(), step=self.step)

    def is_finite(self) -> bool:
        return all(
            bool(torch.isfinite(torch.as_tensor(v)).all())
            for v in (self.recon_nats, self.kl_nats, self.signal_mse)
        )


def elbo(model: Denoiser, x, generator=None, eps=None, free_bits=0.0):
    """Single-sample ELBO terms for a normalized batch ``x`` of shape (B, 1, H, W).

    Returns ``(breakdown, objective)`` where ``objective`` is the differentiable
    VAE loss (equal to ``elbo_nats`` unless free bits are enabled). The signal
    MSE is reported but not part of the objective.
    """
    if x.dim() == 3:
        x = x.unsqueeze(1)
    n_pix = x.shape[0] * x.shape[-2] * x.shape[-1]
    latents = model.encode(x, generator, eps)
    field = model.ar(x, latents.features)
    log_px, _ = gmm_log_prob(field, x)
    recon = -log_px.mean()
    kl_levels = [term.sum() / n_pix for term in latents.kl_per_level]
    kl = torch.stack(kl_levels).sum()
    objective_kl = kl
    if free_bits > 0:
        objective_kl = torch.stack([torch.clamp(k, min=free_bits) for k in kl_levels]).sum()
    mse = signal_loss(model.predict_signal(latents), x)
    breakdown = LossBreakdown(recon, kl, recon + kl, mse)
    return breakdown, recon + objective_kl


def _term_array(terms: LossBreakdown) -> np.ndarray:
    return np.array(
        [float(torch.as_tensor(v).detach()) for v in
         (terms.recon_nats, terms.kl_nats, terms.elbo_nats, terms.signal_mse)]
    )


def make_optimizers(model: Denoiser, lr: float):
    return {
        "vae": torch.optim.Adamax(model.vae_parameters(), lr=lr),
        "signal": torch.optim.Adamax(model.signal_parameters(), lr=lr),
    }


def training_step(
    model: Denoiser,
    batch,
    optimizers: dict,
    generators,
    config: TrainConfig,
    step: int = 0,
    train_vae: bool = True,
    train_signal: bool = True,
) -> LossBreakdown:
    """One optimizer update, accumulating gradients over virtual sub-batches.

    ``generators`` holds one torch generator per batch element so sub-batching
    does not change the posterior samples. On a non-finite loss the gradients
    are discarded and :class:`NonFiniteLoss` is raised without updating.
    """
    if batch.dim() == 3:
        batch = batch.unsqueeze(1)
    b = batch.shape[0]
    if b % config.virtual_batches:
        raise ValueError(f"batch of {b} not divisible into {config.virtual_batches} virtual batches")
    if isinstance(generators, torch.Generator):
        seed = int(torch.randint(0, 2**62, (1,), generator=generators))
        generators = rng_mod.per_item_generators(seed, b)
    model.train()
    for opt in optimizers.values():
        opt.zero_grad(set_to_none=True)
    sub = b // config.virtual_batches
    totals = np.zeros(4)
    for k in range(config.virtual_batches):
        part = slice(k * sub, (k + 1) * sub)
        streams = None if generators is None else generators[part]
        try:
            terms, objective = elbo(model, batch[part], streams, free_bits=config.free_bits)
            loss = objective * train_vae + terms.signal_mse * train_signal
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at step {step}")
        except (NonFiniteLoss, NonFiniteStats) as exc:
            for opt in optimizers.values():
                opt.zero_grad(set_to_none=True)
            if isinstance(exc, NonFiniteLoss):
                raise
            raise NonFiniteLoss(f"non-finite loss at step {step}: {exc}") from exc
        weight = sub / b
        (loss * weight).backward()
        totals += weight * _term_array(terms)
    if config.grad_clip:
        for params in (model.vae_parameters(), model.signal_parameters()):
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
    if train_vae:
        optimizers["vae"].step()
    if train_signal:
        optimizers["signal"].step()
    return LossBreakdown(*totals, step=step)


class PlateauSchedule:
    """Shared plateau controller for both optimizers.

    ``start`` records the baseline validation loss. Each ``update`` counts an
    epoch without strict improvement; after ``patience`` such epochs every
    learning rate is divided by ``factor`` and the count restarts. Training
    should stop once ``stop_patience`` epochs pass without a new best.
    """

    def __init__(self, optimizers, patience=50, factor=10.0, stop_patience=100):
        self.optimizers = list(optimizers)
        self.patience = patience
        self.factor = factor
        self.stop_patience = stop_patience
        self.best = float("inf")
        self.bad_epochs = 0
        self.epochs_since_best = 0

    def start(self, loss: float):
        self.best = loss
        self.bad_epochs = 0
        self.epochs_since_best = 0

    @property
    def lr(self) -> float:
        return self.optimizers[0].param_groups[0]["lr"]

    def update(self, loss: float) -> bool:
        """Record one epoch's validation loss; returns True on a new best."""
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
            self.epochs_since_best = 0
            return True
        self.bad_epochs += 1
        self.epochs_since_best += 1
        if self.bad_epochs >= self.patience:
            for opt in self.optimizers:
                for group in opt.param_groups:
                    group["lr"] = group["lr"] / self.factor
            self.bad_epochs = 0
            log.info("validation plateau: learning rate decayed to %g", self.lr)
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_best >= self.stop_patience


def _fit_crop(image, size):
    """Largest usable crop edge for ``image`` not exceeding ``size``."""
    return min(size, image.shape[0]), min(size, image.shape[1])


def _center_crop(image, height, width):
    top = (image.shape[0] - height) // 2
    left = (image.shape[1] - width) // 2
    return image[top : top + height, left : left + width]


def _valid_edge(edge, factor):
    return edge - edge % factor


@torch.no_grad()
def validation_loss(model: Denoiser, images, crop: int, seed: int = 0, batch_size: int = 16) -> LossBreakdown:
    """Mean ELBO terms over center crops of ``images`` with a fixed sampling seed."""
    model.eval()
    factor = model.config.hierarchy.total_factor
    crops = []
    for im in images:
        h, w = _fit_crop(im, crop)
        crops.append(_center_crop(im, _valid_edge(h, factor), _valid_edge(w, factor)))
    groups: dict[tuple, list] = {}
    for c in crops:
        groups.setdefault(c.shape, []).append(c)
    totals = np.zeros(4)
    count = 0
    gen = rng_mod.make_generator(seed)
    dtype = next(model.parameters()).dtype
    for arrays in groups.values():
        for start in range(0, len(arrays), batch_size):
            chunk = torch.as_tensor(np.stack(arrays[start : start + batch_size]), dtype=dtype)
            terms, _ = elbo(model, chunk.unsqueeze(1), gen)
            n = chunk.shape[0] * chunk.shape[-1] * chunk.shape[-2]
            totals += n * _term_array(terms)
            count += n
    return LossBreakdown(*(totals / count))


class MetricsLog:
    """Step-indexed CSV of loss terms; a no-op without a path."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def write(self, loss: LossBreakdown, lr: float, split: str):
        row = (loss.step, loss.recon_nats, loss.kl_nats, loss.elbo_nats, loss.signal_mse, lr, split)
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow(row)


def _epoch_batches(images, config: TrainConfig, rng: np.random.Generator, factor: int):
    """Random crops of every training image, grouped into batches."""
    order = rng.permutation(len(images))
    crops = []
    for idx in order:
        im = images[idx]
        h, w = _fit_crop(im, config.crop)
        h, w = _valid_edge(h, factor), _valid_edge(w, factor)
        crops.append(random_crop(im, CropSpec(h, w), rng))
    by_shape: dict[tuple, list] = {}
    for c in crops:
        by_shape.setdefault(c.shape, []).append(c)
    batches = []
    for arrays in by_shape.values():
        full = len(arrays) - len(arrays) % config.batch_size
        for start in range(0, full, config.batch_size):
            batches.append(np.stack(arrays[start : start + config.batch_size]))
    if not batches:
        raise ValueError(
            f"too few training crops ({len(crops)}) to fill a batch of {config.batch_size}"
        )
    return batches


def set_determinism(enabled: bool):
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def fit(
    train: ImageStack,
    val: ImageStack,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    *,
    metrics_path=None,
    val_loss_fn: Callable[[Denoiser], float] | None = None,
    dtype=torch.float32,
    progress: Callable[[str], None] | None = None,
    run_config=None,
) -> Checkpoint:
    """Train a denoiser and return the checkpoint with the best validation ELBO.

    Validation runs once before training (the plateau baseline) and after
    every epoch, one epoch being one random crop of each training image.
    ``val_loss_fn`` replaces the validation ELBO, e.g. for schedule tests.
    """
    from cosdd.config import RunConfig

    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    if model_config is None:
        model_config = ModelConfig.preset(config.preset)
    if run_config is None:
        run_config = RunConfig.from_parts(config, model_config)
    set_determinism(config.deterministic)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    train_n, stats = normalize_stack(train)
    val_n, _ = normalize_stack(val, stats)
    model = Denoiser(model_config).to(dtype)
    optimizers = make_optimizers(model, config.lr)
    schedule = PlateauSchedule(
        optimizers.values(), config.plateau_patience, config.decay_factor, config.early_stop_patience
    )
    metrics = MetricsLog(metrics_path)
    factor = model_config.hierarchy.total_factor

    def evaluate(step):
        if val_loss_fn is not None:
            loss = LossBreakdown(0.0, 0.0, float(val_loss_fn(model)), 0.0, step)
        else:
            loss = validation_loss(model, val_n.images, config.crop, seed=config.seed)
            loss.step = step
        metrics.write(loss, schedule.lr, "val")
        return loss.elbo_nats

    def snapshot(step):
        return Checkpoint(
            model_state=copy.deepcopy(model.state_dict()),
            optimizer_states={k: copy.deepcopy(o.state_dict()) for k, o in optimizers.items()},
            config=run_config.to_flat(),
            norm_stats=stats,
            step=step,
        )

    schedule.start(evaluate(0))
    best = None
    best_loss = float("inf")
    step = 0
    nonfinite = 0
    epoch = 0
    train_vae = True
    train_signal = not config.two_stage
    while step < config.max_steps:
        epoch += 1
        for batch in _epoch_batches(train_n.images, config, rng, factor):
            streams = rng_mod.per_item_generators(rng, batch.shape[0])
            x = torch.as_tensor(batch, dtype=dtype)
            try:
                loss = training_step(
                    model, x, optimizers, streams, config, step + 1, train_vae, train_signal
                )
            except NonFiniteLoss as exc:
                nonfinite += 1
                log.warning("%s; skipped (%d/%d)", exc, nonfinite, config.max_nonfinite)
                if nonfinite >= config.max_nonfinite:
                    raise
                continue
            nonfinite = 0
            step += 1
            metrics.write(loss, schedule.lr, "train")
            if step >= config.max_steps:
                break
        val_loss = evaluate(step)
        if progress:
            progress(f"epoch {epoch} step {step} val_elbo {val_loss:.5f} lr {schedule.lr:g}")
        schedule.update(val_loss)
        if val_loss < best_loss or best is None:
            best_loss = val_loss
            best = snapshot(step)
        if schedule.should_stop:
            log.info("validation plateau for %d epochs; stopping", config.early_stop_patience)
            break

    if config.two_stage:
        model.load_state_dict(best.model_state)
        steps = config.signal_steps or max(1, step // 4)
        fit_signal_head(model, train_n, config, optimizers, steps, rng, dtype, metrics)
        best = snapshot(best.step)
    best.extra["epochs"] = epoch
    best.extra["best_val_elbo"] = best_loss
    return best


def fit_signal_head(model, train_n, config, optimizers, steps, rng, dtype, metrics=None):
    """Second-stage training of the signal decoder with the VAE frozen."""
    factor = model.config.hierarchy.total_factor
    done = 0
    while done < steps:
        for batch in _epoch_batches(train_n.images, config, rng, factor):
            streams = rng_mod.per_item_generators(rng, batch.shape[0])
            loss = training_step(
                model, torch.as_tensor(batch, dtype=dtype), optimizers, streams, config,
                done + 1, train_vae=False, train_signal=True,
            )
            done += 1
            if metrics is not None:
                metrics.write(loss, optimizers["signal"].param_groups[0]["lr"], "signal")
            if done >= steps:
                break


def restore_optimizers(model: Denoiser, checkpoint: Checkpoint, lr: float):
    optimizers = make_optimizers(model, lr)
    for name, opt in optimizers.items():
        if name in checkpoint.optimizer_states:
            opt.load_state_dict(checkpoint.optimizer_states[name])
    return optimizers


def normalize_batch(images, stats: NormStats, dtype=torch.float32):
    return torch.as_tensor(stats.normalize(np.stack(images)), dtype=dtype)
