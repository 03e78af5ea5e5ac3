"""GCTF1 writer, byte-for-byte per the consuming pipeline's format:

    bytes 0..7    magic ``GCTFv001``
    bytes 8..11   little-endian u32 row count
    bytes 12..15  little-endian u32 column count
    then          row-major float32 payload
    then          UTF-8 JSON trailer, including a sha256 of the payload
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GCTFv001"


def save_gctf(path, values: np.ndarray, trailer: dict) -> None:
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(values), dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"GCTF1 stores 2-D matrices, got shape {arr.shape}")
    payload = arr.tobytes(order="C")
    trailer = dict(trailer)
    trailer["sha256"] = hashlib.sha256(payload).hexdigest()
    blob = (
        MAGIC
        + struct.pack("<II", arr.shape[0], arr.shape[1])
        + payload
        + json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode()
    )
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_trailer(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a GCTF1 file")
    rows, cols = struct.unpack("<II", blob[8:16])
    return json.loads(blob[16 + rows * cols * 4 :].decode())
