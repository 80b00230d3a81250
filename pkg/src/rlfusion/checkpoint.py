"""Checkpoint serialization.

A checkpoint is a directory with two files:
  manifest.json  -- {"blob": "params.bin", "params": [{"name", "shape",
                     "dtype", "offset"}, ...]} with byte offsets into the blob
  params.bin     -- one raw little-endian stream of 32-bit floats
"""

from __future__ import annotations

import json
import os

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


def save_checkpoint(path: str, params: dict[str, Tensor]) -> None:
    """Write parameters (cast to float32) under `path`."""
    os.makedirs(path, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": "float32", "offset": offset})
        chunks.append(arr.tobytes())
        offset += len(chunks[-1])
    manifest = {"blob": BLOB_NAME, "params": entries}
    with open(os.path.join(path, BLOB_NAME), "wb") as f:
        f.write(b"".join(chunks))
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint directory into {name: float32 array}."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"no manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    with open(os.path.join(path, manifest["blob"]), "rb") as f:
        blob = f.read()
    out = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(shape).copy()
    return out


def restore_params(params: dict[str, Tensor], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into model tensors; mismatches raise CheckpointError."""
    problems = []
    for name, p in params.items():
        if name not in loaded:
            problems.append(f"missing parameter {name!r}")
        elif tuple(loaded[name].shape) != tuple(p.data.shape):
            problems.append(f"{name!r}: checkpoint shape {loaded[name].shape} "
                            f"!= model shape {p.data.shape}")
    for name in loaded:
        if name not in params:
            problems.append(f"unexpected parameter {name!r}")
    if problems:
        raise CheckpointError("checkpoint/model mismatch: " + "; ".join(sorted(problems)))
    for name, p in params.items():
        p.data = loaded[name].astype(p.data.dtype)
