"""Command-line entry point: ``cosdd <subcommand> [options]``.

Subcommands: simulate, train, denoise, evaluate, ablate-rf, diagnose-noise.
Each run writes ``manifest.json`` next to its outputs with the resolved
configuration, the seed and SHA-256 hashes of inputs and artifacts.
Progress lines go to stderr. Set ``COSDD_CACHE`` to choose where generated
datasets are cached (default ``~/.cache/cosdd``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from cosdd.errors import CosddError

log = logging.getLogger("cosdd")

SUBCOMMANDS = ("simulate", "train", "denoise", "evaluate", "ablate-rf", "diagnose-noise")


def cache_dir() -> Path:
    return Path(os.environ.get("COSDD_CACHE") or Path.home() / ".cache" / "cosdd")


def _progress(message: str):
    print(message, file=sys.stderr, flush=True)


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _hash_tree(paths, root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(Path(p) for p in paths):
        if p.is_dir():
            out.update(_hash_tree([q for q in p.rglob("*") if q.is_file()], root))
        elif p.is_file():
            try:
                key = str(p.resolve().relative_to(root.resolve()))
            except ValueError:
                key = str(p)
            out[key] = sha256_file(p)
    return out


def write_manifest(out_dir, command, args, seed, config, artifacts, inputs=()) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": seed,
        "config": config,
        "inputs": _hash_tree(inputs, out_dir),
        "artifacts": _hash_tree(artifacts, out_dir),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _load(path, fmt):
    from cosdd.data import load_stack

    return load_stack(path, fmt)


def cached_textures(n: int, size: int, seed: int) -> np.ndarray:
    """Procedural clean images, cached under ``COSDD_CACHE``."""
    from cosdd.noise import procedural_textures

    path = cache_dir() / f"textures_n{n}_s{size}_seed{seed}.npy"
    if path.exists():
        return np.load(path)
    images = np.stack(procedural_textures(n, size, np.random.default_rng(seed)))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npy")
    np.save(tmp, images)
    os.replace(tmp, path)
    return images


# ---------------------------------------------------------------- simulate


def _noise_config(args):
    from cosdd.config import NoiseConfig

    fields = {f.name for f in dataclasses.fields(NoiseConfig)}
    values = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    values["recipe"] = args.recipe
    return NoiseConfig(**values)


def cmd_simulate(args) -> int:
    from cosdd.data import save_frames
    from cosdd.noise import apply_recipe

    out = Path(args.out)
    noise = _noise_config(args)
    inputs = []
    if args.input:
        stack = _load(args.input, args.format)
        clean, names = list(stack.images), list(stack.source_ids)
        inputs.append(Path(args.input))
    else:
        clean = list(cached_textures(args.n, args.size, args.seed))
        names = [f"image{i:05d}" for i in range(len(clean))]
    # one independent stream per image, so image k does not depend on the count
    streams = np.random.SeedSequence(args.seed).spawn(len(clean))
    params = noise.params()
    noisy = [apply_recipe(s, noise.recipe, params, np.random.default_rng(ss)) for s, ss in zip(clean, streams)]
    artifacts = save_frames(noisy, out / "noisy", names)
    if not args.input:
        artifacts += save_frames(clean, out / "clean", names)
    _progress(f"simulate: wrote {len(noisy)} noisy frames to {out / 'noisy'}")
    write_manifest(out, "simulate", args, args.seed, dataclasses.asdict(noise), artifacts, inputs)
    return 0


# ------------------------------------------------------------------- train


def _overrides(args):
    from cosdd.config import FLAG_KEYS

    values = {flag: getattr(args, flag) for flag in FLAG_KEYS if getattr(args, flag, None) is not None}
    if getattr(args, "deterministic", False):
        values["train.deterministic"] = "true"
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CosddError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    return values


def cmd_train(args) -> int:
    from cosdd.checkpoint import save_checkpoint
    from cosdd.config import parse_config
    from cosdd.data import split_train_val
    from cosdd.trainer import fit

    overrides = _overrides(args)
    if args.data:
        overrides["paths.data"] = args.data
    if args.format:
        overrides["paths.format"] = args.format
    if args.out:
        overrides["paths.out"] = args.out
    run = parse_config(args.config, overrides, preset=args.preset)
    if not run.paths.data:
        raise CosddError("no training data: pass --data or set paths.data")
    out = Path(run.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    stack = _load(run.paths.data, run.paths.format)
    train, val = split_train_val(stack, run.train.val_fraction, seed=run.train.seed)
    _progress(f"train: {len(train)} training / {len(val)} validation images, preset {run.preset}")
    (out / "config.txt").write_text(run.to_text())
    ckpt = fit(
        train, val, run.train, run.model_config(),
        metrics_path=out / "metrics.csv", progress=_progress, run_config=run,
    )
    save_checkpoint(ckpt, out / "model.ckpt")
    ckpt.norm_stats.save(out / "norm_stats.txt")
    _progress(f"train: best checkpoint at step {ckpt.step} written to {out / 'model.ckpt'}")
    artifacts = [out / "model.ckpt", out / "metrics.csv", out / "config.txt", out / "norm_stats.txt"]
    write_manifest(out, "train", args, run.train.seed, run.to_flat(), artifacts, [Path(run.paths.data)])
    return 0


# ----------------------------------------------------------------- denoise


def _trained_model(path):
    """The model in a checkpoint and the configuration it was trained with."""
    from cosdd.checkpoint import load_checkpoint
    from cosdd.inference import TrainedModel

    ckpt = load_checkpoint(path)
    return TrainedModel.from_checkpoint(ckpt), ckpt.config


def cmd_denoise(args) -> int:
    from cosdd.data import save_frames
    from cosdd.inference import DenoiseRequest, denoise, sample_solutions

    models, config = _trained_model(args.ckpt)
    stack = _load(args.input, args.format)
    out = Path(args.out)
    artifacts = []
    for k, (image, name) in enumerate(zip(stack.images, stack.source_ids)):
        req = DenoiseRequest(
            image, n_samples=args.samples, seed=args.seed + k, tile=args.tile,
            overlap=args.overlap, clip=args.clip,
        )
        artifacts += save_frames([denoise(req, models)], out / "denoised", [name])
        if args.save_samples:
            samples = sample_solutions(image, args.save_samples, models, seed=args.seed + k,
                                       tile=args.tile, overlap=args.overlap)
            stem = Path(name).stem
            artifacts += save_frames(samples, out / "samples" / stem,
                                     [f"{stem}_sample{i:03d}" for i in range(len(samples))])
        _progress(f"denoise: {k + 1}/{len(stack)} {name}")
    write_manifest(out, "denoise", args, args.seed, config, artifacts, [Path(args.ckpt), Path(args.input)])
    return 0


# ---------------------------------------------------------------- evaluate


def _match_by_stem(a, b):
    """Pair frames of two stacks whose source names share a filename stem."""
    index = {Path(n).stem: i for i, n in enumerate(b.source_ids)}
    pairs = []
    for i, name in enumerate(a.source_ids):
        stem = Path(name).stem
        if stem not in index:
            raise CosddError(f"no frame matching {stem!r} in the comparison stack")
        pairs.append((i, index[stem], stem))
    return pairs


def cmd_evaluate(args) -> int:
    from cosdd.evaluation import psnr_table

    gt = _load(args.gt, args.format)
    pred = _load(args.pred, args.format)
    pairs = _match_by_stem(gt, pred)
    noisy_images = None
    if args.noisy:
        noisy = _load(args.noisy, args.format)
        lookup = {Path(n).stem: im for n, im in zip(noisy.source_ids, noisy.images)}
        noisy_images = [lookup[stem] for _, _, stem in pairs]
    rows = psnr_table(
        [gt.images[i] for i, _, _ in pairs], [pred.images[j] for _, j, _ in pairs],
        [stem for _, _, stem in pairs], args.data_range, noisy_images,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    columns = ["name", "psnr"] + (["noisy_psnr"] if noisy_images is not None else [])
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow({c: ("mean" if c == "name" else float(np.mean([r[c] for r in rows]))) for c in columns})
    _progress(f"evaluate: mean PSNR {np.mean([r['psnr'] for r in rows]):.3f} dB over {len(rows)} frames")
    inputs = [Path(p) for p in (args.gt, args.pred, args.noisy) if p]
    write_manifest(out.parent, "evaluate", args, None, {"data_range": args.data_range}, [out], inputs)
    return 0


# ---------------------------------------------------------------- ablate-rf


def cmd_ablate_rf(args) -> int:
    from cosdd.config import parse_config
    from cosdd.evaluation import plot_ablation, rf_ablation, write_ablation

    run = parse_config(args.config, _overrides(args), preset=args.preset)
    noisy = _load(args.data, args.format)
    clean = _load(args.gt, args.format)
    pairs = _match_by_stem(noisy, clean)
    lengths = [v.strip() if v.strip() == "full" else int(v) for v in args.lengths.split(",")]
    rows = rf_ablation(
        [clean.images[j] for _, j, _ in pairs], [noisy.images[i] for i, _, _ in pairs], lengths,
        run.train, run.model_config(), n_test=args.n_test, n_samples=args.samples,
        data_range=args.data_range, val_fraction=run.train.val_fraction, progress=_progress,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = [write_ablation(rows, out / "ablation.csv"), plot_ablation(rows, out / "ablation.png")]
    for r in rows:
        _progress(f"ablate-rf: length {r.label} PSNR {r.psnr:.3f} dB {r.error}")
    write_manifest(out, "ablate-rf", args, run.train.seed, run.to_flat(), artifacts,
                   [Path(args.data), Path(args.gt)])
    return 0 if all(not r.error for r in rows) else 1


# ----------------------------------------------------------- diagnose-noise


def cmd_diagnose_noise(args) -> int:
    from cosdd.evaluation import noise_reconstruction_report, write_noise_report

    models, config = _trained_model(args.ckpt)
    stack = _load(args.input, args.format)
    images = list(stack.images)
    truths = None
    if args.gt:
        gt = _load(args.gt, args.format)
        lookup = {Path(n).stem: im for n, im in zip(gt.source_ids, gt.images)}
        truths = [lookup[Path(n).stem] for n in stack.source_ids]
    if args.limit:
        images = images[: args.limit]
        truths = truths[: args.limit] if truths is not None else None
    bins = None
    if args.bins:
        pooled = np.concatenate([im.ravel() for im in (truths or images)])
        lo, hi = np.percentile(pooled, [1, 99])
        bins = np.linspace(lo, hi, args.bins + 1)
    report = noise_reconstruction_report(
        images, models, seed=args.seed, ground_truth=truths, max_lag=args.max_lag,
        bins=bins, n_samples=args.samples,
    )
    artifacts = write_noise_report(report, args.out)
    _progress(
        f"diagnose-noise: autocorrelation cosine {report.autocorr_cosine:.4f}"
        + (" (untrained model)" if report.untrained else "")
    )
    inputs = [Path(args.ckpt), Path(args.input)] + ([Path(args.gt)] if args.gt else [])
    write_manifest(args.out, "diagnose-noise", args, args.seed, config, artifacts, inputs)
    return 0


# ------------------------------------------------------------------ parser


def _add_format(p):
    from cosdd.data import FORMATS

    p.add_argument("--format", choices=FORMATS, default="raster-dir", help="input layout")


def _add_model_flags(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--preset", choices=("small", "large"))
    p.add_argument("--rf-length", dest="rf_length", help="AR receptive field length, or 'full'")
    p.add_argument("--rf-orientation", dest="rf_orientation", choices=("row", "column", "full"))
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--virtual-batches", dest="virtual_batches", type=int)
    p.add_argument("--deterministic", action="store_true", help="force reproducible kernels")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any dotted config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cosdd", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("simulate", help="corrupt clean images with synthetic noise")
    p.add_argument("--recipe", choices=("stripe", "checkerboard", "awg", "poisson", "poisson-gaussian"),
                   default="checkerboard")
    p.add_argument("--in", dest="input", help="clean images; procedural textures when omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=500, help="number of procedural images")
    p.add_argument("--size", type=int, default=64, help="procedural image edge length")
    _add_format(p)
    for name, kind in (
        ("poisson-scale", float), ("awg-std", float), ("stripe-std", float), ("blur-std", float),
        ("dep-coeff", float), ("pattern-amp", float), ("run-length", int), ("s-floor", float),
        ("std", float), ("gain", float),
    ):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=kind)
    p.add_argument("--blur-axis", dest="blur_axis", choices=("horizontal", "vertical"))
    p.add_argument("--dep-as-std", dest="dep_is_variance", action="store_false", default=None,
                   help="read the checkerboard dependence coefficient as a std instead of a variance")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a denoiser")
    p.add_argument("--data", help="directory or file with noisy training images")
    p.add_argument("--format", choices=("raster-dir", "stacked-container", "array-file"))
    p.add_argument("--out", help="run directory")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise images with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--save-samples", dest="save_samples", type=int, default=0)
    p.add_argument("--clip", action="store_true", help="clip estimates to the input range")
    _add_format(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("evaluate", help="PSNR table of predictions against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--noisy", help="also score the noisy inputs")
    p.add_argument("--out", required=True, help="CSV file")
    p.add_argument("--data-range", dest="data_range", type=float,
                   help="PSNR peak; default max - min of each ground-truth frame")
    _add_format(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-rf", help="train one model per AR receptive-field length")
    p.add_argument("--data", required=True, help="noisy images")
    p.add_argument("--gt", required=True, help="clean images with matching names")
    p.add_argument("--lengths", default="1,4,16,full")
    p.add_argument("--n-test", dest="n_test", type=int, default=10)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--data-range", dest="data_range", type=float, default=1.0)
    p.add_argument("--out", required=True)
    _add_format(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate_rf)

    p = sub.add_parser("diagnose-noise", help="compare real and model-resampled noise")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--gt", help="clean images; the denoised estimate is used otherwise")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-lag", dest="max_lag", type=int, default=8)
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--samples", type=int, default=25)
    p.add_argument("--limit", type=int, help="use only the first N images")
    _add_format(p)
    p.set_defaults(func=cmd_diagnose_noise)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except (CosddError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
