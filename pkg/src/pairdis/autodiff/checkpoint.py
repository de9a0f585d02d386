"""Parameter checkpoints: raw little-endian float32 blocks plus a JSON manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


class CheckpointError(IOError):
    """Checkpoint file missing, truncated, or inconsistent with its manifest."""


_FORMAT = "pairdis-checkpoint-v1"


def manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path, tensors: dict, *, config_hash: str = "",
                    rng_seeds=None, step: int = 0) -> dict:
    """Write named tensors as one contiguous <f4 binary plus a sidecar manifest."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        blob = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    manifest = {
        "format": _FORMAT,
        "dtype": "<f4",
        "tensors": entries,
        "config_hash": config_hash,
        "rng_seeds": list(rng_seeds) if rng_seeds is not None else [],
        "step": int(step),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=1))
    return manifest


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint back as ({name: float32 array}, manifest)."""
    path = Path(path)
    mpath = manifest_path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint binary not found: {path}")
    if not mpath.exists():
        raise CheckpointError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != _FORMAT:
        raise CheckpointError(f"unrecognized checkpoint format in {mpath}")
    payload = path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"checkpoint payload hash mismatch for {path}")
    tensors = {}
    for e in manifest["tensors"]:
        start, n = e["offset"], e["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"truncated checkpoint: {path} at tensor {e['name']}")
        a = np.frombuffer(payload[start:start + n], dtype="<f4")
        expect = int(np.prod(e["shape"])) if e["shape"] else 1
        if a.size != expect:
            raise CheckpointError(
                f"tensor {e['name']} size {a.size} != shape {e['shape']}")
        tensors[e["name"]] = a.reshape(e["shape"]).copy()
    return tensors, manifest
