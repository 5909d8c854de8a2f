"""Versioned binary checkpoint: JSON header plus flat float64 payload.

Layout: magic, u32 version, u64 header length, UTF-8 JSON header,
then the named arrays in header order as big contiguous float64 bytes.
Arrays remember their original dtype so a resumed 32-bit run casts back
to exactly the values it saved (float32 -> float64 -> float32 is lossless).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError

MAGIC = b"PLMP"
VERSION = 1


def _manifest(arrays: dict) -> list:
    return [
        {"name": k, "shape": list(a.shape), "dtype": str(a.dtype)}
        for k, a in arrays.items()
    ]


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    """arrays: flat name -> ndarray; meta: JSON-safe run position / digest."""
    header = {"meta": meta, "arrays": _manifest(arrays)}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype=np.float64).tobytes())


def load_checkpoint(path):
    """Returns (arrays dict restored to their saved dtypes, meta dict)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigError(f"not a checkpoint file: {path}")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    arrays = {}
    off = 16 + hlen
    for ent in header["arrays"]:
        n = int(np.prod(ent["shape"], dtype=np.int64))
        flat = np.frombuffer(raw, dtype=np.float64, count=n, offset=off)
        off += n * 8
        arrays[ent["name"]] = flat.reshape(ent["shape"]).astype(ent["dtype"])
    if off != len(raw):
        raise ConfigError("checkpoint payload length mismatch")
    return arrays, header["meta"]
