"""On-disk checkpoint format.

A checkpoint is a directory:

    metadata.json          format_version, training step, ModelConfig fields,
                           config fingerprint, ordered parameter names
    params/<name>.bin      one file per state-dict entry

Each .bin holds a little-endian header — uint32 rank, then rank uint64 shape
dims — followed by the row-major float32 payload. Integer buffers (BatchNorm
step counts) pass through float32; their values stay far below 2^24 so the
round-trip is exact. Save -> load is bit-exact for every float32 parameter.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .model import KeyframeRestorer

FORMAT_VERSION = 1


def _write_array(path: Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        fh.write(array.tobytes())


def _read_array(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
        payload = fh.read()
    array = np.frombuffer(payload, dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if array.size != expected:
        raise ValueError(f"{path}: payload holds {array.size} floats, header says {expected}")
    return array.reshape(shape)


def save_checkpoint(directory, model: KeyframeRestorer, step: int) -> Path:
    """Write the model's full state (parameters and buffers) plus metadata."""
    directory = Path(directory)
    params_dir = directory / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    for name, tensor in state.items():
        _write_array(params_dir / f"{name}.bin", tensor.detach().cpu().numpy())
    metadata = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "config": asdict(model.cfg),
        "config_fingerprint": model.cfg.fingerprint(),
        "parameters": list(state.keys()),
    }
    (directory / "metadata.json").write_text(
        json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return directory


def read_metadata(directory) -> dict:
    path = Path(directory) / "metadata.json"
    if not path.exists():
        raise FileNotFoundError(f"not a checkpoint directory: {directory}")
    metadata = json.loads(path.read_text(encoding="utf-8"))
    if metadata.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{directory}: checkpoint format {metadata.get('format_version')} "
            f"not supported (expected {FORMAT_VERSION})"
        )
    return metadata


def load_checkpoint(directory) -> tuple[KeyframeRestorer, int]:
    """Rebuild the model from a checkpoint directory; returns (model, step)."""
    directory = Path(directory)
    metadata = read_metadata(directory)
    raw = dict(metadata["config"])
    raw["feature_extractor_widths"] = tuple(raw["feature_extractor_widths"])
    cfg = ModelConfig(**raw)
    if cfg.fingerprint() != metadata["config_fingerprint"]:
        raise ValueError(
            f"{directory}: config fingerprint {metadata['config_fingerprint']} does not "
            f"match rebuilt config {cfg.fingerprint()}"
        )
    model = KeyframeRestorer(cfg)
    state = model.state_dict()
    loaded = {}
    for name in metadata["parameters"]:
        if name not in state:
            raise ValueError(f"{directory}: parameter {name!r} not present in this architecture")
        array = _read_array(directory / "params" / f"{name}.bin")
        loaded[name] = torch.from_numpy(array.copy()).to(state[name].dtype).reshape(state[name].shape)
    missing = set(state) - set(loaded)
    if missing:
        raise ValueError(f"{directory}: checkpoint misses parameters {sorted(missing)[:4]}")
    model.load_state_dict(loaded)
    return model, int(metadata["step"])
