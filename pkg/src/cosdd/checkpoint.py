"""Single-file checkpoints: JSON header with checksum, then a torch payload.

Layout::

    b"COSDDCKPT\\n"  8-byte little-endian header length  JSON header  payload

The header records the format version, the resolved flat configuration, the
normalization statistics, the step counter and the SHA-256 of the payload.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import torch

from cosdd.data import NormStats
from cosdd.errors import CorruptFile, PresetMismatch, VersionMismatch

MAGIC = b"COSDDCKPT\n"
FORMAT_VERSION = "v1"


@dataclasses.dataclass
class Checkpoint:
    model_state: dict
    optimizer_states: dict
    config: dict  # flat resolved configuration, see cosdd.config
    norm_stats: NormStats
    step: int = 0
    version: str = FORMAT_VERSION
    extra: dict = dataclasses.field(default_factory=dict)

    @property
    def preset(self):
        return self.config.get("preset")

    def run_config(self):
        from cosdd.config import RunConfig

        return RunConfig.from_flat(self.config)

    def build_model(self):
        """Instantiate the denoiser and load the stored weights (eval mode)."""
        from cosdd.model import Denoiser

        model = Denoiser(self.run_config().model_config())
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    """Write ``checkpoint`` atomically (temporary file then rename)."""
    path = Path(path)
    buffer = io.BytesIO()
    torch.save(
        {"model": checkpoint.model_state, "optimizers": checkpoint.optimizer_states},
        buffer,
    )
    payload = buffer.getvalue()
    header = json.dumps(
        {
            "version": checkpoint.version,
            "config": checkpoint.config,
            "norm_stats": {"mean": checkpoint.norm_stats.mean, "std": checkpoint.norm_stats.std},
            "step": checkpoint.step,
            "extra": checkpoint.extra,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
            "payload_bytes": len(payload),
        },
        sort_keys=True,
    ).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, expected_preset: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC) or len(raw) < len(MAGIC) + 8:
        raise CorruptFile(f"{path} is not a checkpoint file")
    offset = len(MAGIC)
    (header_len,) = struct.unpack("<Q", raw[offset : offset + 8])
    offset += 8
    try:
        header = json.loads(raw[offset : offset + header_len])
    except ValueError as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path} has format {header.get('version')!r}, expected {FORMAT_VERSION!r}"
        )
    payload = raw[offset + header_len :]
    if (
        len(payload) != header["payload_bytes"]
        or hashlib.sha256(payload).hexdigest() != header["payload_sha256"]
    ):
        raise CorruptFile(f"{path}: payload checksum mismatch (truncated or modified)")
    preset = header["config"].get("preset")
    if expected_preset is not None and preset != expected_preset:
        raise PresetMismatch(
            f"{path} was trained with preset {preset!r}, but {expected_preset!r} was requested"
        )
    state = torch.load(io.BytesIO(payload), weights_only=True)
    stats = header["norm_stats"]
    return Checkpoint(
        model_state=state["model"],
        optimizer_states=state["optimizers"],
        config=header["config"],
        norm_stats=NormStats(stats["mean"], stats["std"]),
        step=header["step"],
        version=header["version"],
        extra=header.get("extra", {}),
    )
