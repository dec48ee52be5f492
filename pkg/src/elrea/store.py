"""Binary checkpoint container: JSON manifest + raw little-endian float64 blocks.

Round-trips are bit-exact, which the rest of the package relies on for
byte-identical artifacts on rerun. Arrays are always stored as C-order
little-endian float64; integer state (step counters and the like) rides
in the manifest's meta dict.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"ELRC"
VERSION = 1


def save_arrays(path, kind, arrays, meta=None):
    """Write named float64 arrays to path. Order in file is sorted by name."""
    names = sorted(arrays)
    manifest = {
        "kind": kind,
        "names": names,
        "shapes": {n: list(arrays[n].shape) for n in names},
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True, ensure_ascii=False).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for n in names:
            a = np.ascontiguousarray(arrays[n], dtype="<f8")
            f.write(a.tobytes())
    os.replace(tmp, path)


def load_arrays(path):
    """Read a checkpoint written by save_arrays. Returns (kind, arrays, meta)."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, mlen = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        arrays = {}
        for n in manifest["names"]:
            shape = tuple(manifest["shapes"][n])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated block for {n}")
            arrays[n] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after last block")
    return manifest["kind"], arrays, manifest["meta"]


def write_json(path, obj):
    """Deterministic JSON artifact: sorted keys, no timestamps, trailing newline."""
    text = json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
