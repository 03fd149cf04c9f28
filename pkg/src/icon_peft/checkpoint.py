"""Checkpoints: a JSON manifest next to a contiguous little-endian weight blob."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .adapters import ParameterRegistry
from .errors import ConfigError
from .nn import Module

FORMAT = "icon-peft-checkpoint/1"


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix == ".json":
        return path, path.with_suffix(".bin")
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_checkpoint(path, model: Module, registry: ParameterRegistry | None = None, config: dict | None = None) -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    manifest_path, blob_path = _paths(path)
    trainable = {e.name: e.trainable for e in registry} if registry is not None else {}
    dtypes = {p.dtype for _, p in model.named_parameters()}
    if len(dtypes) != 1:
        raise ConfigError(f"mixed parameter dtypes {sorted(map(str, dtypes))}")
    dtype = np.dtype(dtypes.pop())
    le = dtype.newbyteorder("<")
    tensors = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, p in model.named_parameters():
            raw = np.ascontiguousarray(p.data, dtype=le).tobytes()
            fh.write(raw)
            tensors.append(
                {
                    "name": name,
                    "shape": list(p.shape),
                    "offset": offset,
                    "nbytes": len(raw),
                    "trainable": bool(trainable.get(name, False)),
                }
            )
            offset += len(raw)
    config = config or {}
    manifest = {
        "format": FORMAT,
        "dtype": dtype.name,
        "byte_order": "little",
        "blob": blob_path.name,
        "config_hash": config_hash(config),
        "config": config,
        "tensors": tensors,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def read_manifest(path) -> dict:
    manifest_path, _ = _paths(path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ConfigError(f"{manifest_path}: not an {FORMAT} manifest")
    return manifest


def load_checkpoint(path, model: Module, strict: bool = True) -> dict:
    """Copy weights into ``model`` after validating every shape.

    With ``strict=False`` only names present in both are loaded, which is how a
    pretrained backbone is brought into a model with freshly attached adapters.
    """
    manifest_path, _ = _paths(path)
    manifest = read_manifest(manifest_path)
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    dtype = np.dtype(manifest["dtype"]).newbyteorder("<")
    live = dict(model.named_parameters())
    stored = {t["name"]: t for t in manifest["tensors"]}
    if strict:
        missing = sorted(set(live) - set(stored))
        extra = sorted(set(stored) - set(live))
        if missing or extra:
            raise ConfigError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, entry in stored.items():
        if name not in live:
            continue
        p = live[name]
        if tuple(entry["shape"]) != p.shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {tuple(entry['shape'])}, model expects {p.shape}")
        values = np.frombuffer(blob, dtype=dtype, count=int(np.prod(entry["shape"], dtype=np.int64)),
                               offset=entry["offset"])
        p.data[...] = values.reshape(p.shape)
    return manifest
