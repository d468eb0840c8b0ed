"""Versioned binary checkpoint container.

Layout: 4-byte magic, uint32 format version, uint64 header length, UTF-8
JSON header, then raw array payloads back to back. The header carries the
full config snapshot, free-form metadata, and one descriptor per array
(name, dtype, shape, offset). Writing the same state twice produces
byte-identical files (no timestamps, fixed key order); writes go through
a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .config import ARCH_KEYS, Config, config_from_dict

MAGIC = b"SDCP"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays, cfg: Config, meta=None):
    """Write named arrays plus a config snapshot; atomic and deterministic."""
    names = sorted(arrays)
    descriptors = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        descriptors.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": arr.nbytes,
            }
        )
        offset += arr.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "meta": meta or {},
        "arrays": descriptors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name]).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (arrays dict, Config, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for desc in header["arrays"]:
        start = desc["offset"]
        raw = payload[start : start + desc["nbytes"]]
        arrays[desc["name"]] = np.frombuffer(raw, dtype=desc["dtype"]).reshape(desc["shape"]).copy()
    cfg = config_from_dict(header["config"])
    return arrays, cfg, header.get("meta", {})


def check_architecture(ckpt_cfg: Config, cfg: Config, path="<checkpoint>"):
    """Raise when any architecture-determining key disagrees."""
    mismatches = []
    a, b = ckpt_cfg.to_dict(), cfg.to_dict()
    for key in ARCH_KEYS:
        if a[key] != b[key]:
            mismatches.append(f"{key}: checkpoint={a[key]!r} requested={b[key]!r}")
    if mismatches:
        raise CheckpointError(f"{path}: architecture mismatch: " + "; ".join(mismatches))
