"""Binary parameter checkpoint container.

Layout (all integers little-endian):

    bytes 0..5    magic b"VRMM1\\n"
    bytes 5..13   uint64 manifest length in bytes
    manifest      UTF-8 JSON: {"version": 1, "meta": {...}, "entries":
                  [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    payload       raw little-endian array bytes, offsets relative to the
                  payload base (end of manifest)

Round-trips bit-exactly: values are written as raw buffers, never
re-encoded.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"VRMM1\n"

_ALLOWED_DTYPES = {"float32", "float64", "int32", "int64", "uint8"}


class CheckpointError(IOError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON-serializable ``meta`` block."""
    entries = []
    offset = 0
    blobs = []
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.name
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype!r} for entry {name!r}")
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = little.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"version": 1, "meta": meta or {}, "entries": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(manifest).to_bytes(8, "little"))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as ({name: array}, meta)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a parameter checkpoint")
    mlen = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 8], "little")
    mstart = len(MAGIC) + 8
    try:
        manifest = json.loads(raw[mstart : mstart + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from e
    base = mstart + mlen
    arrays = {}
    for entry in manifest["entries"]:
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointError(f"{path}: entry {entry['name']!r} has bad dtype {dtype!r}")
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: entry {entry['name']!r} payload truncated")
        arr = np.frombuffer(raw[start:end], dtype=np.dtype(dtype).newbyteorder("<"))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype, copy=True)
    return arrays, manifest.get("meta", {})
