"""Named-array archive: a directory of .npy files plus a JSON header.

The header maps each array name to its shape, dtype, and backing file, so a
weight archive can be inspected without loading any data. Used for encoder /
flow weights, LoRA adapters, and optimizer state.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError

HEADER_NAME = "header.json"


def save_archive(path, arrays: dict[str, np.ndarray]):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {}
    for i, name in enumerate(sorted(arrays)):
        arr = np.asarray(arrays[name])
        fname = f"{i:05d}.npy"
        np.save(path / fname, arr)
        header[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype), "file": fname}
    (path / HEADER_NAME).write_text(json.dumps(header, indent=2, sort_keys=True))


def load_archive(path) -> dict[str, np.ndarray]:
    path = Path(path)
    header_path = path / HEADER_NAME
    if not header_path.exists():
        raise CheckpointError(f"no array archive at {path} (missing {HEADER_NAME})")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupted archive header at {path}: {exc}") from exc
    arrays = {}
    for name, meta in header.items():
        fpath = path / meta["file"]
        if not fpath.exists():
            raise CheckpointError(f"archive {path} missing data file for {name!r}")
        arr = np.load(fpath)
        if list(arr.shape) != list(meta["shape"]) or str(arr.dtype) != meta["dtype"]:
            raise CheckpointError(
                f"archive {path}: {name!r} is {arr.shape}/{arr.dtype}, "
                f"header says {meta['shape']}/{meta['dtype']}"
            )
        arrays[name] = arr
    return arrays


def archive_fingerprint(arrays: dict[str, np.ndarray]) -> str:
    """Stable content hash over names, shapes, dtypes, and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
