"""Metrics and noise diagnostics: PSNR, autocorrelation maps, signal dependence,
the receptive-field ablation and the noise-reconstruction report."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from cosdd.errors import ImageTooSmall, NonPositiveRange, ShapeMismatch

log = logging.getLogger(__name__)

# returned by psnr when the prediction is exact
PSNR_INF = math.inf


def psnr(gt, pred, data_range: float = 1.0) -> float:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"ground truth {gt.shape} vs prediction {pred.shape}")
    if not data_range > 0:
        raise NonPositiveRange(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((gt - pred) ** 2))
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(data_range**2 / mse)


def gt_data_range(gt) -> float:
    """max - min of the ground truth, the convention for raw-count data."""
    gt = np.asarray(gt)
    return float(gt.max() - gt.min())


@dataclasses.dataclass
class AutocorrMap:
    """``values[max_lag + dy, max_lag + dx]`` is the correlation at lag (dy, dx)."""

    values: np.ndarray
    n_pixels: int

    @property
    def max_lag(self) -> int:
        return self.values.shape[0] // 2

    def at(self, dy, dx) -> float:
        return float(self.values[self.max_lag + dy, self.max_lag + dx])


def _as_list(images):
    if isinstance(images, np.ndarray) and images.ndim == 2:
        return [images]
    return [np.asarray(im, dtype=np.float64) for im in images]


def spatial_autocorrelation(residual, max_lag: int) -> AutocorrMap:
    """Pearson correlation between pixels and their (dy, dx)-shifted partners.

    Each lag is estimated directly over all overlapping pixel pairs, pooled
    across images when a sequence is given, with separate means for the two
    members of each pair. Lag (0, 0) is exactly 1 and ρ(δ) = ρ(-δ) holds
    exactly, since both use the same pairs.
    """
    images = _as_list(residual)
    for im in images:
        if im.shape[0] <= 2 * max_lag or im.shape[1] <= 2 * max_lag:
            raise ImageTooSmall(f"image {im.shape} too small for max_lag {max_lag}")
    size = 2 * max_lag + 1
    values = np.zeros((size, size))
    for dy in range(-max_lag, max_lag + 1):
        for dx in range(-max_lag, max_lag + 1):
            if dy < 0 or (dy == 0 and dx < 0):
                continue
            n = sa = sb = saa = sbb = sab = 0.0
            for im in images:
                h, w = im.shape
                a = im[0 : h - dy, max(0, -dx) : w - max(0, dx)]
                b = im[dy:h, max(0, dx) : w - max(0, -dx)]
                n += a.size
                sa += a.sum()
                sb += b.sum()
                saa += np.dot(a.ravel(), a.ravel())
                sbb += np.dot(b.ravel(), b.ravel())
                sab += np.dot(a.ravel(), b.ravel())
            cov = sab / n - (sa / n) * (sb / n)
            var_a = saa / n - (sa / n) ** 2
            var_b = sbb / n - (sb / n) ** 2
            rho = cov / math.sqrt(var_a * var_b) if var_a > 0 and var_b > 0 else 0.0
            values[max_lag + dy, max_lag + dx] = rho
            values[max_lag - dy, max_lag - dx] = rho
    values[max_lag, max_lag] = 1.0
    return AutocorrMap(values, int(sum(im.size for im in images)))


def map_cosine_similarity(a: AutocorrMap, b: AutocorrMap, exclude_center=False) -> float:
    va, vb = a.values.ravel().copy(), b.values.ravel().copy()
    if exclude_center:
        centre = va.size // 2
        va[centre] = vb[centre] = 0.0
    denom = np.linalg.norm(va) * np.linalg.norm(vb)
    return float(va @ vb / denom) if denom > 0 else 0.0


@dataclasses.dataclass
class SignalDependenceProfile:
    bin_edges: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    counts: np.ndarray
    min_count: int = 100

    @property
    def reliable(self) -> np.ndarray:
        return self.counts >= self.min_count

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])


def signal_dependence(residual, signal, bins=None, min_count=100) -> SignalDependenceProfile:
    """Residual mean and std within bins of signal intensity.

    ``bins`` are bin edges (the last bin is closed); by default five equal
    bins spanning the 1st to 99th signal percentile. Bins holding fewer than
    ``min_count`` pixels are flagged unreliable and their statistics are NaN
    when empty.
    """
    residuals = _as_list(residual)
    signals = _as_list(signal)
    if len(residuals) != len(signals) or any(r.shape != s.shape for r, s in zip(residuals, signals)):
        raise ShapeMismatch("residual and signal shapes differ")
    r = np.concatenate([x.ravel() for x in residuals])
    s = np.concatenate([x.ravel() for x in signals])
    if bins is None:
        lo, hi = np.percentile(s, [1, 99])
        bins = np.linspace(lo, hi, 6)
    edges = np.asarray(bins, dtype=np.float64)
    idx = np.digitize(s, edges[1:-1], right=False)
    inside = (s >= edges[0]) & (s <= edges[-1])
    k = len(edges) - 1
    means = np.full(k, np.nan)
    stds = np.full(k, np.nan)
    counts = np.zeros(k, dtype=np.int64)
    for b in range(k):
        sel = r[inside & (idx == b)]
        counts[b] = sel.size
        if sel.size:
            means[b] = sel.mean()
            stds[b] = sel.std(ddof=1) if sel.size > 1 else 0.0
    for b in np.flatnonzero(counts < min_count):
        log.debug("signal bin %d holds %d pixels; flagged unreliable", b, counts[b])
    return SignalDependenceProfile(edges, means, stds, counts, min_count)


def profile_agreement(real: SignalDependenceProfile, other: SignalDependenceProfile) -> np.ndarray:
    """Relative std difference per bin occupied in both profiles (NaN elsewhere)."""
    ok = real.reliable & other.reliable
    out = np.full(len(real.stds), np.nan)
    out[ok] = np.abs(other.stds[ok] - real.stds[ok]) / real.stds[ok]
    return out


@dataclasses.dataclass
class NoiseReport:
    real_autocorr: AutocorrMap
    resampled_autocorr: AutocorrMap
    real_profile: SignalDependenceProfile
    resampled_profile: SignalDependenceProfile
    panels: dict
    untrained: bool = False

    @property
    def autocorr_cosine(self) -> float:
        return map_cosine_similarity(self.real_autocorr, self.resampled_autocorr)

    @property
    def autocorr_cosine_off_center(self) -> float:
        return map_cosine_similarity(self.real_autocorr, self.resampled_autocorr, exclude_center=True)

    @property
    def std_relative_error(self) -> np.ndarray:
        return profile_agreement(self.real_profile, self.resampled_profile)


def noise_reconstruction_report(
    images,
    models,
    seed: int = 0,
    ground_truth=None,
    max_lag: int = 8,
    bins=None,
    n_samples: int = 25,
) -> NoiseReport:
    """Compare real noise with noise resampled from the autoregressive decoder.

    Each image is encoded, one latent is drawn and the AR decoder generates a
    new noisy image from it. The resampled noise is that image minus the
    signal decoder's output for the same latent. The real noise is the image
    minus the ground truth when given, else minus the denoised estimate.
    """
    from cosdd.inference import DenoiseRequest, denoise, resample_noisy

    images = _as_list(images)
    truths = _as_list(ground_truth) if ground_truth is not None else None
    real_res, real_sig, fake_res, fake_sig = [], [], [], []
    first = {}
    for k, x in enumerate(images):
        if truths is not None:
            s = truths[k]
        else:
            s = denoise(DenoiseRequest(x, n_samples=n_samples, seed=seed + k), models)
        resampled, s_z = resample_noisy(x, models, seed=seed + k, return_signal=True)
        real_res.append(x - s)
        real_sig.append(s)
        fake_res.append(resampled - s_z)
        fake_sig.append(s_z)
        if k == 0:
            first = {"noisy": x, "signal": s, "resampled": resampled, "resampled_signal": s_z}
    if bins is None:
        pooled = np.concatenate([s.ravel() for s in real_sig])
        lo, hi = np.percentile(pooled, [1, 99])
        bins = np.linspace(lo, hi, 6)
    return NoiseReport(
        real_autocorr=spatial_autocorrelation(real_res, max_lag),
        resampled_autocorr=spatial_autocorrelation(fake_res, max_lag),
        real_profile=signal_dependence(real_res, real_sig, bins),
        resampled_profile=signal_dependence(fake_res, fake_sig, bins),
        panels=first,
        untrained=models.step == 0,
    )


def write_noise_report(report: NoiseReport, out_dir) -> list[Path]:
    """CSV profiles and autocorrelation maps plus PNG panels."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "signal_dependence.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "source", "count", "mean", "std", "reliable"])
        for name, prof in (("real", report.real_profile), ("resampled", report.resampled_profile)):
            for b in range(len(prof.counts)):
                w.writerow([prof.bin_edges[b], prof.bin_edges[b + 1], name, prof.counts[b],
                            prof.means[b], prof.stds[b], bool(prof.reliable[b])])
    written.append(path)
    for name, amap in (("real", report.real_autocorr), ("resampled", report.resampled_autocorr)):
        path = out / f"autocorr_{name}.csv"
        np.savetxt(path, amap.values, delimiter=",")
        written.append(path)
    path = out / "summary.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["autocorr_cosine", report.autocorr_cosine])
        w.writerow(["autocorr_cosine_off_center", report.autocorr_cosine_off_center])
        w.writerow(["max_std_relative_error", np.nanmax(report.std_relative_error)
                    if np.any(np.isfinite(report.std_relative_error)) else float("nan")])
        w.writerow(["untrained", report.untrained])
    written.append(path)
    written.append(_plot_report(report, out / "noise_report.png"))
    return written


def _plot_report(report: NoiseReport, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, axes = plt.subplots(2, 3, figsize=(12, 8))
    panels = report.panels
    for ax, key in zip(axes[0], ("noisy", "resampled", "signal")):
        if key in panels:
            ax.imshow(panels[key], cmap="gray")
        ax.set_title(key)
        ax.axis("off")
    vmax = max(np.abs(report.real_autocorr.values).max(), 1e-12)
    for ax, (name, amap) in zip(axes[1][:2], (("real", report.real_autocorr),
                                              ("resampled", report.resampled_autocorr))):
        ax.imshow(amap.values, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
        ax.set_title(f"autocorrelation ({name})")
    ax = axes[1][2]
    ax.plot(report.real_profile.centers, report.real_profile.stds, "o-", label="real")
    ax.plot(report.resampled_profile.centers, report.resampled_profile.stds, "s--", label="resampled")
    ax.set_xlabel("signal")
    ax.set_ylabel("noise std")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


@dataclasses.dataclass
class AblationRow:
    length: int | None  # None is the full receptive field
    psnr: float
    noisy_psnr: float
    estimate_std_ratio: float
    error: str = ""

    @property
    def label(self) -> str:
        return "full" if self.length is None else str(self.length)


def rf_ablation(
    clean: Sequence[np.ndarray],
    noisy: Sequence[np.ndarray],
    lengths,
    base_config,
    model_config,
    *,
    n_test: int = 10,
    n_samples: int = 10,
    data_range: float = 1.0,
    val_fraction: float = 0.1,
    progress=None,
) -> list[AblationRow]:
    """Train one model per receptive-field length and score it by PSNR.

    ``lengths`` holds integers or ``"full"``/``None`` for the full
    receptive field. The last ``n_test`` images are held out for scoring.
    ``estimate_std_ratio`` is the std of the denoised images' means across
    test images divided by the same for the clean images; a value near 0
    means every output collapsed to one constant image.
    """
    from cosdd.ar_decoder import ReceptiveFieldSpec
    from cosdd.data import ImageStack, split_train_val
    from cosdd.inference import DenoiseRequest, TrainedModel, denoise
    from cosdd.trainer import fit

    clean = list(clean)
    noisy = list(noisy)
    train_stack = ImageStack.from_arrays(noisy[:-n_test])
    train, val = split_train_val(train_stack, val_fraction, seed=base_config.seed)
    test_clean, test_noisy = clean[-n_test:], noisy[-n_test:]
    noisy_psnr = float(np.mean([psnr(s, x, data_range) for s, x in zip(test_clean, test_noisy)]))
    clean_spread = float(np.std([s.mean() for s in test_clean]))
    rows = []
    for length in lengths:
        full = length is None or length == "full"
        orientation = "full" if full else (
            model_config.ar.rf.orientation if model_config.ar.rf.orientation != "full" else "row"
        )
        rf = ReceptiveFieldSpec(orientation, None if full else int(length))
        mc = dataclasses.replace(model_config, ar=dataclasses.replace(model_config.ar, rf=rf))
        try:
            ckpt = fit(train, val, base_config, mc, progress=progress)
            tm = TrainedModel.from_checkpoint(ckpt)
            estimates = [denoise(DenoiseRequest(x, n_samples=n_samples, seed=i), tm)
                         for i, x in enumerate(test_noisy)]
            score = float(np.mean([psnr(s, e, data_range) for s, e in zip(test_clean, estimates)]))
            spread = float(np.std([e.mean() for e in estimates]))
            rows.append(AblationRow(None if full else int(length), score, noisy_psnr,
                                    spread / clean_spread if clean_spread > 0 else float("nan")))
        except Exception as exc:  # noqa: BLE001 - one failed row must not abort the table
            log.exception("ablation row %s failed", length)
            rows.append(AblationRow(None if full else int(length), float("nan"), noisy_psnr,
                                    float("nan"), error=repr(exc)))
    return rows


def write_ablation(rows: Sequence[AblationRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rf_length", "psnr", "noisy_psnr", "estimate_std_ratio", "error"])
        for r in rows:
            w.writerow([r.label, r.psnr, r.noisy_psnr, r.estimate_std_ratio, r.error])
    return path


def plot_ablation(rows: Sequence[AblationRow], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = [r.label for r in rows]
    ax.plot(range(len(rows)), [r.psnr for r in rows], "o-", label="denoised")
    ax.plot(range(len(rows)), [r.noisy_psnr for r in rows], "k:", label="noisy input")
    ax.set_xticks(range(len(rows)), labels)
    ax.set_xlabel("receptive field length")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return Path(path)


def psnr_table(gt_images, pred_images, names, data_range=None, noisy_images=None):
    """Rows of (name, psnr[, noisy_psnr]); ``data_range`` None uses each gt's max - min."""
    rows = []
    for k, (gt, pred, name) in enumerate(zip(gt_images, pred_images, names)):
        dr = data_range if data_range is not None else gt_data_range(gt)
        row = {"name": name, "psnr": psnr(gt, pred, dr)}
        if noisy_images is not None:
            row["noisy_psnr"] = psnr(gt, noisy_images[k], dr)
        rows.append(row)
    return rows
