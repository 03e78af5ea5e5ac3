"""Small input-validation helpers used by the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch


def as_float_matrix(x, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeMismatch(f"{name} contains non-finite values")
    return arr


def check_same_rows(a: np.ndarray, b: np.ndarray, names=("X", "Y")) -> None:
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(
            f"{names[0]} has {a.shape[0]} rows but {names[1]} has {b.shape[0]}"
        )


def check_positive(values, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if arr.size == 0 or np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be a nonempty list of positive finite numbers")
    return arr


def derive_seed(root: int, name: str) -> int:
    """Named substream seed: stable across runs and platforms."""
    import hashlib

    digest = hashlib.blake2b(f"{root}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2**63)
