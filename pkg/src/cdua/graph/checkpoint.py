"""Parameter persistence: ``manifest.json`` + little-endian float32 ``weights.bin``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .optim import ParamStore

MANIFEST = "manifest.json"
BLOB = "weights.bin"
FORMAT = "cdua-params/1"


class CheckpointError(Exception):
    pass


def save_params(store: ParamStore, directory) -> Path:
    """Write every parameter; quantizes the store to float32 first so that a
    reload reproduces forward passes exactly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    store.quantize()
    entries = []
    offset = 0
    chunks = []
    for name, p in store.params.items():
        raw = p.data.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    (directory / BLOB).write_bytes(b"".join(chunks))
    manifest = {"format": FORMAT, "byteorder": "little", "total_bytes": offset, "params": entries}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return directory


def load_params(store: ParamStore, directory) -> None:
    """Fill ``store`` (already built with matching names/shapes) from disk."""
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.exists():
        raise CheckpointError(f"missing {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob = (directory / BLOB).read_bytes() if (directory / BLOB).exists() else None
    if blob is None:
        raise CheckpointError(f"missing {directory / BLOB}")
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"weights.bin is {len(blob)} bytes, manifest declares {manifest['total_bytes']}")
    seen = set()
    for e in manifest["params"]:
        name = e["name"]
        if name not in store:
            raise CheckpointError(f"checkpoint parameter {name!r} not in model")
        target = store[name]
        if tuple(e["shape"]) != target.shape:
            raise CheckpointError(f"{name}: shape {e['shape']} != model {list(target.shape)}")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"])), offset=e["offset"])
        target.data = arr.astype(np.float64).reshape(target.shape)
        seen.add(name)
    missing = set(store.names()) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
