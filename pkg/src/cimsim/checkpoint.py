"""Checkpoint persistence: JSON manifest plus one flat float32 blob.

Parameters are stored little-endian float32 under their names, sorted, with
offsets recorded in the manifest; the format has no Python-specific content
so other tooling can read it.
"""

from __future__ import annotations

import json
import os

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint"]

FORMAT = "cimsim-checkpoint-v1"
MANIFEST = "manifest.json"
BLOB = "params.bin"


def save_checkpoint(path: str, params: dict[str, np.ndarray], extra: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "size": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "dtype": "float32",
        "byte_order": "little",
        "entries": entries,
        "extra": extra or {},
    }
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(os.path.join(path, BLOB), "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(path, MANIFEST)) as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} checkpoint")
    with open(os.path.join(path, BLOB), "rb") as f:
        blob = f.read()
    params: dict[str, np.ndarray] = {}
    for e in manifest["entries"]:
        raw = blob[e["offset"] : e["offset"] + e["size"]]
        if len(raw) != e["size"]:
            raise ValueError(f"{path}: blob truncated at entry {e['name']!r}")
        params[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
    return params, manifest.get("extra", {})
