"""Checkpoint files: a JSON manifest plus one little-endian float blob.

A checkpoint is a directory::

    manifest.json   {"config", "seed", "blob", "blob_size", "sha256",
                     "tensors": [{"name", "shape", "dtype", "offset"}, ...]}
    weights.bin     concatenated little-endian arrays (float32, or float64 for
                    models built in 64-bit mode)
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from .model import N_STREAMS, Backbone, BackboneConfig, ConfigError, MultiStreamModel, build_model
from .tensor import precision

FORMAT = "reenact-checkpoint"
VERSION = 1
BLOB = "weights.bin"
MANIFEST = "manifest.json"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """Manifest and blob disagree, or files are missing/corrupt."""


def save_checkpoint(model: MultiStreamModel, path: str | Path, extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtype_name = np.dtype(model.dtype).name
    if dtype_name not in _DTYPES:
        raise CheckpointError(f"unsupported parameter dtype {dtype_name}")
    entries = []
    chunks = []
    offset = 0
    for name, arr in model.state_dict().items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype_name, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "blob": BLOB,
        "blob_size": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
        "extra": extra or {},
    }
    tmp = path / (BLOB + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Validated manifest and name -> array mapping."""
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.exists():
        raise CheckpointError(f"checkpoint manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest {mpath}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath} is not a {FORMAT} manifest")
    bpath = path / manifest.get("blob", BLOB)
    if not bpath.exists():
        raise CheckpointError(f"checkpoint blob not found: {bpath}")
    blob = bpath.read_bytes()
    if len(blob) != manifest["blob_size"]:
        raise CheckpointError(f"checkpoint blob {bpath} has {len(blob)} bytes, manifest says {manifest['blob_size']}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"checkpoint blob {bpath} fails its checksum")
    state = {}
    for e in manifest["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + count * dt.itemsize
        if end > len(blob):
            raise CheckpointError(f"tensor {e['name']!r} runs past the end of the blob")
        state[e["name"]] = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
    return manifest, state


def load_checkpoint(path: str | Path, config: BackboneConfig | None = None) -> MultiStreamModel:
    """Rebuild a model from a checkpoint.

    With ``config`` the model is built from that config instead of the stored
    one, and any shape disagreement raises :class:`ConfigError` naming the
    first offending parameter. Nothing is returned on failure.
    """
    manifest, state = read_checkpoint(path)
    cfg = config or BackboneConfig.from_dict(manifest["config"])
    dtypes = {e["dtype"] for e in manifest["tensors"]}
    dtype = np.float64 if dtypes == {"float64"} else np.float32
    if config is not None:
        _check_shapes(cfg, state)
    with precision(dtype):
        model = build_model(cfg, seed=int(manifest.get("seed", 0)))
    model.load_state_dict(state)
    return model


def _check_shapes(cfg: BackboneConfig, state: dict[str, np.ndarray]) -> None:
    # one probe backbone gives the per-stream inventory without allocating all five
    probe = Backbone(cfg, np.random.Generator(np.random.Philox(0)))
    names = list(probe.params.items()) + list(probe.buffers.items())
    for i in range(N_STREAMS):
        for name, t in names:
            full = f"streams.{i}.{name}"
            shape = t.shape
            if full not in state:
                raise ConfigError(f"checkpoint is missing parameter {full!r}")
            if tuple(state[full].shape) != tuple(shape):
                raise ConfigError(
                    f"shape mismatch for parameter {full!r}: checkpoint {tuple(state[full].shape)} vs config {tuple(shape)}"
                )
