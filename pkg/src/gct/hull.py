"""Uniform sampling inside the convex hull of a point cloud.

Degenerate clouds are reduced to their effective affine subspace first, so a
2-D cloud padded with constant coordinates still samples correctly.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from .errors import DegenerateHull

_REL_TOL = 1e-9


def effective_subspace(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Origin and orthonormal basis of the affine span of the points."""
    pts = np.asarray(points, dtype=np.float64)
    origin = pts.mean(axis=0)
    centered = pts - origin
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    scale = svals[0] if svals.size and svals[0] > 0 else 0.0
    rank = int(np.sum(svals > _REL_TOL * max(scale, 1.0)))
    if rank == 0:
        raise DegenerateHull(
            "all points coincide; there is no hull to sample. Check that the "
            "model weights differ across voxels (an all-equal weight matrix "
            "usually means fitting failed or collapsed)."
        )
    return origin, vt[:rank]


def sample_in_hull(points: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Draw n points uniformly inside the convex hull of the cloud.

    Rejection sampling from the bounding box of the effective subspace;
    membership is tested with a Delaunay triangulation of the cloud.
    """
    pts = np.asarray(points, dtype=np.float64)
    origin, basis = effective_subspace(pts)
    reduced = (pts - origin) @ basis.T
    rng = np.random.default_rng(seed)
    if basis.shape[0] == 1:
        lo, hi = reduced.min(), reduced.max()
        samples = rng.uniform(lo, hi, size=(n, 1))
        return samples @ basis + origin
    tri = Delaunay(reduced)
    lo = reduced.min(axis=0)
    hi = reduced.max(axis=0)
    out = np.empty((n, reduced.shape[1]))
    filled = 0
    attempts = 0
    while filled < n:
        batch = max(4 * (n - filled), 256)
        draw = rng.uniform(lo, hi, size=(batch, reduced.shape[1]))
        inside = draw[tri.find_simplex(draw) >= 0]
        take = min(len(inside), n - filled)
        out[filled : filled + take] = inside[:take]
        filled += take
        attempts += batch
        if attempts > 200_000 * max(n, 1):
            raise DegenerateHull(
                "rejection sampling is not accepting points; the hull volume "
                "is negligible relative to its bounding box"
            )
    return out @ basis + origin
