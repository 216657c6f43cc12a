"""Run configuration: flat ``key = value`` files with dotted namespaces.

Example::

    preset = small
    rf.orientation = column
    rf.length = 16
    train.max_steps = 5000
    hierarchy.hidden = 32

Resolution order is preset defaults, then the file, then flag overrides.
Unknown keys are rejected. :meth:`RunConfig.to_text` writes every resolved
value so a run can be reproduced from its manifest alone.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from cosdd.ar_decoder import ARDecoderConfig, ReceptiveFieldSpec
from cosdd.errors import InvalidValue, UnknownKey
from cosdd.ladder import HierarchyConfig
from cosdd.model import ModelConfig
from cosdd.noise import CheckerboardNoiseParams, StripeNoiseParams
from cosdd.signal_decoder import SignalDecoderConfig
from cosdd.trainer import TrainConfig

PRESETS = ("small", "large")


@dataclasses.dataclass(frozen=True)
class NoiseConfig:
    recipe: str = "checkerboard"
    poisson_scale: float = 0.002
    awg_std: float = 0.02
    stripe_std: float = 0.025
    blur_std: float = 1.0
    blur_axis: str = "horizontal"
    dep_coeff: float = 0.15
    pattern_amp: float = 0.1
    run_length: int = 2
    s_floor: float = 0.05
    dep_is_variance: bool = True
    std: float = 0.1
    gain: float = 1.0

    def params(self):
        if self.recipe == "stripe":
            return StripeNoiseParams(
                self.poisson_scale, self.awg_std, self.stripe_std, self.blur_std, self.blur_axis
            )
        if self.recipe == "checkerboard":
            return CheckerboardNoiseParams(
                self.dep_coeff, self.pattern_amp, self.run_length, "vertical", self.s_floor,
                self.dep_is_variance,
            )
        if self.recipe == "awg":
            return {"std": self.std}
        if self.recipe == "poisson":
            return {"gain": self.gain}
        if self.recipe == "poisson-gaussian":
            return {"gain": self.gain, "std": self.std}
        raise InvalidValue("noise.recipe", f"unknown recipe {self.recipe!r}")


@dataclasses.dataclass(frozen=True)
class PathConfig:
    data: str = ""
    format: str = "raster-dir"
    out: str = "runs"


# section name -> dataclass, in the order they are written out
SECTIONS = {
    "train": TrainConfig,
    "hierarchy": HierarchyConfig,
    "ar": ARDecoderConfig,
    "rf": ReceptiveFieldSpec,
    "signal": SignalDecoderConfig,
    "noise": NoiseConfig,
    "paths": PathConfig,
}
# fields stored in another section
_SKIP = {("ar", "rf"), ("train", "preset")}

# flag spelling -> dotted key
FLAG_KEYS = {
    "rf_length": "rf.length",
    "rf_orientation": "rf.orientation",
    "lr": "train.lr",
    "max_steps": "train.max_steps",
    "crop": "train.crop",
    "seed": "train.seed",
    "batch_size": "train.batch_size",
    "virtual_batches": "train.virtual_batches",
}


def _preset_defaults(preset: str) -> dict[str, dict]:
    if preset not in PRESETS:
        raise InvalidValue("preset", f"must be one of {PRESETS}, got {preset!r}")
    hierarchy = HierarchyConfig.preset(preset)
    return {
        "train": dataclasses.asdict(TrainConfig(preset=preset)),
        "hierarchy": dataclasses.asdict(hierarchy),
        "ar": {f.name: getattr(ARDecoderConfig(), f.name) for f in dataclasses.fields(ARDecoderConfig)},
        "rf": dataclasses.asdict(ReceptiveFieldSpec()),
        "signal": dataclasses.asdict(SignalDecoderConfig()),
        "noise": dataclasses.asdict(NoiseConfig()),
        "paths": dataclasses.asdict(PathConfig()),
    }


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _parse_value(key: str, raw, annotation):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    try:
        if annotation is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str or origin is typing.Literal:
            if origin is typing.Literal and text not in args:
                raise ValueError(f"must be one of {args}")
            return text
        if origin is tuple:
            return tuple(int(v) for v in text.replace("(", "").replace(")", "").split(",") if v.strip())
        if origin in (typing.Union, types.UnionType):
            if text.lower() in ("none", "full", "unbounded", ""):
                if type(None) in args:
                    return None
            inner = [a for a in args if a is not type(None)]
            return _parse_value(key, text, inner[0])
    except ValueError as exc:
        raise InvalidValue(key, str(exc)) from None
    raise InvalidValue(key, f"unsupported field type {annotation}")


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def read_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidValue(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


@dataclasses.dataclass(frozen=True)
class RunConfig:
    preset: str
    train: TrainConfig
    hierarchy: HierarchyConfig
    ar: ARDecoderConfig
    signal: SignalDecoderConfig
    noise: NoiseConfig = NoiseConfig()
    paths: PathConfig = PathConfig()

    @property
    def rf(self) -> ReceptiveFieldSpec:
        return self.ar.rf

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.hierarchy, self.ar, self.signal)

    @classmethod
    def from_parts(cls, train: TrainConfig, model: ModelConfig, noise=None, paths=None):
        return cls(
            train.preset, train, model.hierarchy, model.ar, model.signal,
            noise or NoiseConfig(), paths or PathConfig(),
        )

    @classmethod
    def from_flat(cls, values: dict) -> "RunConfig":
        values = dict(values)
        preset = str(values.pop("preset", "small"))
        sections = _preset_defaults(preset)
        for key, raw in values.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or (section, name) in _SKIP:
                raise UnknownKey(f"unknown configuration key {key!r}")
            field_types = _field_types(SECTIONS[section])
            if name not in field_types:
                raise UnknownKey(f"unknown configuration key {key!r}")
            sections[section][name] = _parse_value(key, raw, field_types[name])
        try:
            rf = ReceptiveFieldSpec(**sections["rf"])
            ar_fields = {k: v for k, v in sections["ar"].items() if k != "rf"}
            hierarchy = sections["hierarchy"]
            n_levels = hierarchy["n_levels"]
            if len(hierarchy["latent_dims"]) != n_levels and "hierarchy.latent_dims" not in values:
                # n_levels overridden without dims: keep the preset's per-level width
                dims = HierarchyConfig.preset(preset).latent_dims
                hierarchy["latent_dims"] = (dims[0],) * (n_levels - 1) + (dims[-1],)
            train = dict(sections["train"], preset=preset)
            return cls(
                preset=preset,
                train=TrainConfig(**train),
                hierarchy=HierarchyConfig(**hierarchy),
                ar=ARDecoderConfig(rf=rf, **ar_fields),
                signal=SignalDecoderConfig(**sections["signal"]),
                noise=NoiseConfig(**sections["noise"]),
                paths=PathConfig(**sections["paths"]),
            )
        except InvalidValue:
            raise
        except (TypeError, ValueError) as exc:
            raise InvalidValue("config", str(exc)) from None

    def to_flat(self) -> dict[str, str]:
        flat = {"preset": self.preset}
        objects = {
            "train": self.train, "hierarchy": self.hierarchy, "ar": self.ar, "rf": self.rf,
            "signal": self.signal, "noise": self.noise, "paths": self.paths,
        }
        for section, obj in objects.items():
            for f in dataclasses.fields(obj):
                if (section, f.name) in _SKIP:
                    continue
                flat[f"{section}.{f.name}"] = _format_value(getattr(obj, f.name))
        return flat

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat().items())


def parse_config(path=None, overrides=None, preset=None) -> RunConfig:
    """Resolve a configuration from an optional file and flag overrides.

    ``overrides`` maps dotted keys (or the flag spellings in ``FLAG_KEYS``)
    to values and wins over the file; ``preset`` wins over a preset named in
    the file.
    """
    values: dict = {}
    if path is not None:
        values.update(read_config_text(Path(path).read_text()))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[FLAG_KEYS.get(key, key)] = value if isinstance(value, str) else _format_value(value)
    if preset is not None:
        values["preset"] = preset
    return RunConfig.from_flat(values)
