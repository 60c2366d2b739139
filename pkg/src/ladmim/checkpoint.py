"""Self-describing binary checkpoint format.

Layout: 4-byte magic ``LDMM``, little-endian u32 format version, u64 JSON
metadata length, the UTF-8 metadata (config, stage, metrics, parameter
manifest), then all parameter arrays concatenated as little-endian float32
in manifest order. Loading rejects a wrong magic/version and truncated
payloads; round-trips are bitwise exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"LDMM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, meta: dict, arrays: dict):
    """Write atomically (temp file + rename). `arrays` order defines the manifest."""
    manifest = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape)})
        payload += arr32.tobytes()
    meta = dict(meta)
    meta["manifest"] = manifest
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(bytes(payload))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (meta, arrays) with arrays as float32 in manifest order."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack("<Q", blob[8:16])
    meta = json.loads(blob[16:16 + meta_len].decode("utf-8"))
    pos = 16 + meta_len
    arrays = {}
    for entry in meta["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated payload at '{entry['name']}'")
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes after payload")
    return meta, arrays


def payload_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
