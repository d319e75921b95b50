"""Checkpoint serialization: named parameters in a flat binary plus a JSON manifest.

Binary layout (little endian): magic, parameter count, then per parameter a
length-prefixed utf-8 name, the rank, the dimensions, and raw float64 data.
The manifest (same path with .json suffix) records config, step count, and the
parameter inventory for inspection without parsing the binary.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDCKPT01"


class CheckpointError(RuntimeError):
    """Raised for unreadable or inconsistent checkpoint files."""


def manifest_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    config: dict, step: int) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    manifest = {
        "format": MAGIC.decode("ascii"),
        "step": int(step),
        "config": config,
        "params": [{"name": n, "shape": list(np.shape(v))} for n, v in params.items()],
    }
    with open(manifest_path(path), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with open(manifest_path(path), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing manifest {manifest_path(path)}") from exc
    params: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n_items = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n_items)
            if len(raw) != 8 * n_items:
                raise CheckpointError(f"{path}: truncated data for '{name}'")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return params, manifest


def load_model(path: str | Path):
    """Rebuild a model from a checkpoint and its manifest config.

    Returns (model, run_config). The manifest's config block must be a full
    run-configuration document.
    """
    from .config import config_from_dict
    from .model import DiarizationModel
    from .rng import stream

    params, manifest = load_checkpoint(path)
    cfg = config_from_dict(manifest["config"])
    model = DiarizationModel(cfg.model, stream(0, "model-init"))
    model.load_state(params)
    return model, cfg
