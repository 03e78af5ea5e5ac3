"""GCTF1 on-disk matrix format.

Layout, byte-exact:

    bytes 0..7    magic ``GCTFv001``
    bytes 8..11   little-endian u32 row count
    bytes 12..15  little-endian u32 column count
    then          row-major float32 payload (rows*cols*4 bytes)
    then          UTF-8 JSON trailer (to end of file)

The trailer carries ids, the time grid, and provenance; it always includes a
``sha256`` of the payload bytes which is verified on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .core import ResponseMatrix, TRGrid
from .errors import ParseError

MAGIC = b"GCTFv001"


def save_gctf(path, values, trailer: dict) -> None:
    """Write a matrix; values are cast to float32."""
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


def load_gctf(path) -> tuple[np.ndarray, dict]:
    """Read a matrix back as float32 plus its JSON trailer."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise ParseError(f"{path}: not a GCTF1 file")
    rows, cols = struct.unpack("<II", blob[8:16])
    end = 16 + rows * cols * 4
    if len(blob) < end:
        raise ParseError(f"{path}: truncated payload ({rows}x{cols})")
    values = np.frombuffer(blob[16:end], dtype="<f4").reshape(rows, cols).copy()
    try:
        trailer = json.loads(blob[end:].decode()) if len(blob) > end else {}
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad JSON trailer: {exc}") from exc
    digest = trailer.get("sha256")
    if digest is not None and digest != hashlib.sha256(blob[16:end]).hexdigest():
        raise ParseError(f"{path}: payload checksum mismatch")
    return values, trailer


def _grid_trailer(grid: TRGrid) -> dict:
    return {
        "tr_s": grid.tr_s,
        "n_volumes": grid.n_volumes,
        "trim_head": grid.trim_head,
        "trim_tail": grid.trim_tail,
        "t0_s": grid.t0_s,
    }


def _grid_from(trailer: dict) -> TRGrid:
    return TRGrid(
        tr_s=trailer["tr_s"],
        n_volumes=trailer["n_volumes"],
        trim_head=trailer["trim_head"],
        trim_tail=trailer["trim_tail"],
        t0_s=trailer.get("t0_s", 0.0),
    )


def save_model(model, path) -> None:
    """Encoding-model file: GCTF1 weight payload plus a trailer with the
    penalties, CV spec, extractor id, and test correlations."""
    trailer = {
        "kind": "model",
        "voxel_ids": list(model.voxel_ids),
        "lambda_per_voxel": model.lambda_per_voxel.tolist(),
        "extractor_id": model.extractor_id,
        "test_r": None if model.test_r is None else model.test_r.tolist(),
        "lag_set": list(model.lag_set),
        "tr_s": model.tr_s,
        "cv_spec": model.cv_spec,
    }
    save_gctf(path, model.weights, trailer)


def load_model(path):
    from .encoding import EncodingModel

    values, trailer = load_gctf(path)
    if trailer.get("kind") != "model":
        raise ParseError(f"{path}: trailer kind is {trailer.get('kind')!r}, expected 'model'")
    return EncodingModel(
        voxel_ids=tuple(trailer["voxel_ids"]),
        weights=np.asarray(values, dtype=np.float64),
        lambda_per_voxel=np.asarray(trailer["lambda_per_voxel"]),
        extractor_id=trailer["extractor_id"],
        test_r=None if trailer["test_r"] is None else np.asarray(trailer["test_r"]),
        lag_set=tuple(trailer["lag_set"]),
        tr_s=trailer["tr_s"],
        cv_spec=trailer["cv_spec"],
    )


def save_response(rm: ResponseMatrix, path) -> None:
    trailer = {
        "kind": "response",
        "voxel_ids": list(rm.voxel_ids),
        "grid": _grid_trailer(rm.grid),
        "meta": rm.meta,
    }
    save_gctf(path, rm.values, trailer)


def load_response(path) -> ResponseMatrix:
    values, trailer = load_gctf(path)
    if trailer.get("kind") != "response":
        raise ParseError(f"{path}: trailer kind is {trailer.get('kind')!r}, expected 'response'")
    return ResponseMatrix(
        grid=_grid_from(trailer["grid"]),
        voxel_ids=tuple(trailer["voxel_ids"]),
        values=values,
        meta=trailer.get("meta", {}),
    )
