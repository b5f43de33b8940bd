"""Module checkpoints: a JSON manifest plus a raw little-endian float32 blob."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .field_data import BundleError, atomic_write_bytes, atomic_write_text

__all__ = ["save_module", "load_state", "read_manifest"]


def save_module(module: nn.Module, path: str | os.PathLike, kind: str, config: dict,
                extra: dict | None = None) -> Path:
    """Write ``module``'s parameters and buffers that persist in its state dict."""
    path = Path(path).with_suffix(".json")
    blob = path.with_suffix(".f32")
    entries, chunks, offset = [], [], 0
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.ravel().tobytes())
        offset += int(arr.size)
    manifest = {"kind": kind, "config": config, "dtype": "f32", "payload": blob.name,
                "params": entries, "extra": extra or {}}
    atomic_write_bytes(blob, b"".join(chunks))
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | os.PathLike) -> dict:
    path = Path(path).with_suffix(".json")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}: checkpoint manifest is not valid JSON ({exc})") from exc


def load_state(path: str | os.PathLike) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return ``(manifest, state_dict)`` for a checkpoint written by :func:`save_module`."""
    path = Path(path).with_suffix(".json")
    manifest = read_manifest(path)
    raw = np.frombuffer((path.parent / manifest["payload"]).read_bytes(), dtype="<f4")
    total = sum(e["count"] for e in manifest["params"])
    if raw.size != total:
        raise BundleError(f"{path}: blob holds {raw.size} floats, manifest lists {total}")
    state = {}
    for e in manifest["params"]:
        chunk = raw[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(chunk.astype(np.float32))
    return manifest, state
