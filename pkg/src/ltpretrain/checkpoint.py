"""Checkpoint directories: ``manifest.json`` plus one raw blob per tensor.

``manifest.json`` holds ``{"format", "version", "step", "meta", "tensors": [
{"name", "shape", "dtype", "file", "nbytes", "sha256"}]}``. Blobs are the
C-contiguous little-endian bytes of each tensor.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .errors import CheckpointError

CHECKPOINT_FORMAT = "ltpretrain-checkpoint"


def save_checkpoint(directory, tensors: Mapping[str, torch.Tensor], step: int = 0, meta: Optional[dict] = None) -> Path:
    directory = Path(directory)
    blob_dir = directory / "blobs"
    blob_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, t) in enumerate(tensors.items()):
        arr = t.detach().cpu().contiguous().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        fname = f"blobs/{i:05d}.bin"
        (directory / fname).write_bytes(data)
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.name,
                "file": fname,
                "nbytes": len(data),
                "sha256": hashlib.sha256(data).hexdigest(),
            }
        )
    doc = {"format": CHECKPOINT_FORMAT, "version": 1, "step": int(step), "meta": meta or {}, "tensors": entries}
    (directory / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    return directory


def load_checkpoint(directory, expected_shapes: Optional[Mapping[str, tuple]] = None) -> tuple[dict, dict]:
    """Return ``(tensors, manifest)``. Every failure names the offending tensor."""
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"{directory}: missing manifest.json")
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{mpath}: unreadable manifest ({e.msg})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{mpath}: not an {CHECKPOINT_FORMAT} manifest")
    tensors = {}
    for entry in doc["tensors"]:
        name = entry["name"]
        blob = directory / entry["file"]
        if not blob.exists():
            raise CheckpointError("missing tensor blob", name)
        data = blob.read_bytes()
        if len(data) != entry["nbytes"] or hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise CheckpointError("corrupted tensor blob (size or checksum mismatch)", name)
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]).newbyteorder("<")).reshape(entry["shape"])
        tensors[name] = torch.from_numpy(arr.astype(np.dtype(entry["dtype"]), copy=True))
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in tensors:
                raise CheckpointError("tensor missing from checkpoint", name)
            if tuple(tensors[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"shape mismatch: checkpoint {tuple(tensors[name].shape)} vs expected {tuple(shape)}", name
                )
    return tensors, doc
