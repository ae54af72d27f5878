"""Named-tensor container on top of numpy's ``.npz`` format.

Arrays are stored as raw float64 buffers, so a save/load cycle is bit-exact.
A JSON metadata blob and a format version travel in the same archive.
"""

from __future__ import annotations

import json
import os
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__meta__"
_VERSION_KEY = "__format_version__"


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, Any], meta: Mapping | None = None) -> None:
    arrays = {}
    for name, value in tensors.items():
        if name.startswith("__"):
            raise CheckpointError(f"reserved tensor name {name!r}")
        arrays[name] = np.asarray(getattr(value, "data", value))
    arrays[_META_KEY] = np.array(json.dumps(dict(meta or {}), sort_keys=True))
    arrays[_VERSION_KEY] = np.array(FORMAT_VERSION)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as archive:
        if _VERSION_KEY not in archive.files:
            raise CheckpointError(f"{path}: not a checkpoint (no format version)")
        version = int(archive[_VERSION_KEY])
        if version > FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version} is newer than {FORMAT_VERSION}")
        meta = json.loads(str(archive[_META_KEY]))
        tensors = {k: archive[k] for k in archive.files if not k.startswith("__")}
    return tensors, meta
