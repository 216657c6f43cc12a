"""Loading, normalizing, cropping and splitting grayscale image stacks."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Sequence

import imageio.v3 as iio
import numpy as np
import tifffile

from cosdd.errors import (
    CropTooLarge,
    DegenerateStack,
    MixedShapes,
    NonFiniteValues,
    TooFewImages,
    UnreadableFile,
)

RASTER_SUFFIXES = {".png", ".tif", ".tiff", ".bmp", ".pgm", ".jpg", ".jpeg"}
FORMATS = ("raster-dir", "stacked-container", "array-file")


@dataclasses.dataclass(frozen=True)
class ImageStack:
    """An immutable collection of 2-D float64 frames."""

    images: tuple[np.ndarray, ...]
    source_ids: tuple[str, ...]

    def __post_init__(self):
        images = tuple(np.asarray(im, dtype=np.float64) for im in self.images)
        for im in images:
            if im.ndim != 2 or im.shape[0] < 1 or im.shape[1] < 1:
                raise ValueError(f"expected non-empty 2-D frames, got shape {im.shape}")
            if not np.all(np.isfinite(im)):
                raise NonFiniteValues("stack contains NaN or Inf pixels")
            im.setflags(write=False)
        if len(self.source_ids) != len(images):
            raise ValueError("source_ids must have one entry per image")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "source_ids", tuple(self.source_ids))

    @classmethod
    def from_arrays(cls, arrays, prefix="frame"):
        arrays = list(arrays)
        return cls(tuple(arrays), tuple(f"{prefix}{i:05d}" for i in range(len(arrays))))

    def __len__(self):
        return len(self.images)

    def __getitem__(self, index):
        return self.images[index]

    def subset(self, indices: Sequence[int]) -> "ImageStack":
        return ImageStack(
            tuple(self.images[i] for i in indices),
            tuple(self.source_ids[i] for i in indices),
        )

    def shapes(self):
        return {im.shape for im in self.images}

    def as_array(self) -> np.ndarray:
        """Stack frames into an (n, H, W) array; requires equal shapes."""
        if len(self.shapes()) != 1:
            raise MixedShapes(f"frames have differing shapes: {sorted(self.shapes())}")
        return np.stack(self.images)


@dataclasses.dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.std)) or self.std <= 0:
            raise DegenerateStack(f"invalid normalization statistics {self}")

    def normalize(self, values):
        return (values - self.mean) / self.std

    def denormalize(self, values):
        return values * self.std + self.mean

    def save(self, path):
        Path(path).write_text(f"mean = {self.mean!r}\nstd = {self.std!r}\n")

    @classmethod
    def load(cls, path):
        fields = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = float(value)
        unknown = set(fields) - {"mean", "std"}
        if unknown or len(fields) != 2:
            raise ValueError(f"malformed normalization sidecar {path}: keys {sorted(fields)}")
        return cls(fields["mean"], fields["std"])


@dataclasses.dataclass(frozen=True)
class CropSpec:
    height: int
    width: int
    seed: int = 0


def _to_gray(frame: np.ndarray, reduce_channels: bool, source: str) -> np.ndarray:
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3 and frame.shape[-1] in (1, 2, 3, 4):
        if frame.shape[-1] == 1:
            return frame[..., 0]
        if not reduce_channels:
            raise UnreadableFile(
                f"{source}: multi-channel image; pass reduce_channels=True to average channels"
            )
        channels = frame.shape[-1]
        # drop alpha before averaging
        if channels in (2, 4):
            frame = frame[..., : channels - 1]
        return frame.mean(axis=-1)
    raise UnreadableFile(f"{source}: cannot interpret array of shape {frame.shape} as 2-D frame")


def _read_container(path: Path) -> np.ndarray:
    try:
        return tifffile.imread(path)
    except Exception as exc:  # tifffile raises a zoo of exception types
        raise UnreadableFile(f"cannot read stacked container {path}: {exc}") from exc


def load_stack(
    path,
    format: str = "raster-dir",
    *,
    reduce_channels: bool = False,
    allow_mixed_shapes: bool = True,
) -> ImageStack:
    """Load grayscale frames from disk.

    ``format`` is one of ``raster-dir`` (a directory of single-frame PNG/TIFF
    files, read in sorted filename order), ``stacked-container`` (a multi-page
    TIFF) or ``array-file`` (a ``.npy`` array of shape (H, W) or (n, H, W)).

    Frames of differing shapes are accepted unless ``allow_mixed_shapes`` is
    False, which is the setting to use when frames will not be cropped.
    """
    path = Path(path)
    if not path.exists():
        raise UnreadableFile(f"{path} does not exist")
    frames: list[np.ndarray] = []
    ids: list[str] = []

    if format == "raster-dir":
        if not path.is_dir():
            raise UnreadableFile(f"{path} is not a directory")
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in RASTER_SUFFIXES)
        if not files:
            raise UnreadableFile(f"no raster files in {path}")
        for f in files:
            try:
                if f.suffix.lower() in (".tif", ".tiff"):
                    arr = tifffile.imread(f)
                else:
                    arr = iio.imread(f)
            except Exception as exc:
                raise UnreadableFile(f"cannot decode {f}: {exc}") from exc
            arr = np.asarray(arr)
            if arr.ndim == 3 and arr.shape[-1] not in (1, 2, 3, 4):
                raise UnreadableFile(f"{f} holds {arr.shape[0]} frames; use stacked-container")
            frames.append(_to_gray(arr, reduce_channels, str(f)))
            ids.append(f.name)
    elif format in ("stacked-container", "array-file"):
        if format == "array-file":
            try:
                arr = np.load(path, allow_pickle=False)
            except Exception as exc:
                raise UnreadableFile(f"cannot read array file {path}: {exc}") from exc
        else:
            arr = _read_container(path)
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[None]
        elif arr.ndim == 4:
            arr = np.stack([_to_gray(a, reduce_channels, str(path)) for a in arr])
        elif arr.ndim != 3:
            raise UnreadableFile(f"{path}: expected 2-D or 3-D array, got shape {arr.shape}")
        frames = list(arr)
        ids = [f"{path.name}:{i}" for i in range(len(frames))]
    else:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")

    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    for f, source in zip(frames, ids):
        if not np.all(np.isfinite(f)):
            raise NonFiniteValues(f"{source} contains NaN or Inf pixels")
    if not allow_mixed_shapes and len({f.shape for f in frames}) > 1:
        raise MixedShapes(f"frames in {path} have differing shapes")
    return ImageStack(tuple(frames), tuple(ids))


def compute_norm_stats(stack: ImageStack) -> NormStats:
    if len(stack) == 0:
        raise DegenerateStack("empty stack")
    flat = np.concatenate([im.ravel() for im in stack.images])
    mean = float(flat.mean())
    std = float(np.sqrt(np.mean((flat - mean) ** 2)))
    if not std > 0:
        raise DegenerateStack("all pixels are equal; standard deviation is zero")
    return NormStats(mean, std)


def normalize_stack(stack: ImageStack, stats: NormStats | None = None):
    """Standardize a stack to zero mean and unit std.

    Statistics are computed from ``stack`` unless given, so validation and
    test data can be normalized with the training statistics.
    """
    if stats is None:
        stats = compute_norm_stats(stack)
    normalized = ImageStack(
        tuple(stats.normalize(im) for im in stack.images), stack.source_ids
    )
    return normalized, stats


def random_crop(image: np.ndarray, spec: CropSpec, rng: np.random.Generator | None = None):
    """Crop a ``spec.height`` x ``spec.width`` window at a uniform random offset.

    Without ``rng`` a fresh generator seeded by ``spec.seed`` is used.
    """
    n, m = image.shape
    if spec.height > n or spec.width > m:
        raise CropTooLarge(f"crop {spec.height}x{spec.width} exceeds image {n}x{m}")
    if spec.height < 1 or spec.width < 1:
        raise ValueError("crop dimensions must be positive")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    top = int(rng.integers(0, n - spec.height + 1))
    left = int(rng.integers(0, m - spec.width + 1))
    return image[top : top + spec.height, left : left + spec.width]


def split_train_val(stack: ImageStack, val_fraction: float = 0.1, seed: int = 0):
    n = len(stack)
    if n < 2:
        raise TooFewImages(f"need at least 2 images to split, got {n}")
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    n_val = min(max(int(round(n * val_fraction)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    val_idx = sorted(order[:n_val].tolist())
    train_idx = sorted(order[n_val:].tolist())
    return stack.subset(train_idx), stack.subset(val_idx)


def save_frames(frames, directory, names):
    """Write float frames as 32-bit TIFF files named after ``names``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for frame, name in zip(frames, names):
        stem = Path(name.replace(":", "_")).stem
        out = directory / f"{stem}.tif"
        tifffile.imwrite(out, np.asarray(frame, dtype=np.float32))
        written.append(out)
    return written
