"""Synthetic stand-in for EM data: Voronoi cells with dark boundaries."""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .errors import ParameterError

BOUNDARY_VALUE = 0.2
INTERIOR_VALUE = 0.8


def voronoi_labels(dims: Sequence[int], seeds: np.ndarray) -> np.ndarray:
    """Label ``k + 1`` for voxels nearest (Euclidean) to ``seeds[k]``; ties go to the lower k."""
    grid = np.indices(dims, dtype=np.float64)
    best = np.full(tuple(dims), np.inf)
    labels = np.zeros(tuple(dims), dtype=np.uint64)
    for k, s in enumerate(seeds):
        dist = sum((grid[a] - s[a]) ** 2 for a in range(3))
        closer = dist < best
        best[closer] = dist[closer]
        labels[closer] = k + 1
    return labels


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Voxels with a 6-neighbor carrying a different label."""
    mask = np.zeros(labels.shape, dtype=bool)
    for axis in range(3):
        diff = np.diff(labels.astype(np.int64), axis=axis) != 0
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        mask[tuple(lo)] |= diff
        mask[tuple(hi)] |= diff
    return mask


def gen_synth(dims: Sequence[int], n_seeds: int, sigma: float = 0.0, seed: int = 0
              ) -> Tuple[np.ndarray, np.ndarray]:
    """Returns ``(intensity (D, H, W) float64, gt labels (D, H, W) uint64)``."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ParameterError(f"dims must be three positive extents, got {dims}")
    n_vox = int(np.prod(dims))
    if n_seeds < 1:
        raise ParameterError("n_seeds must be >= 1")
    if n_seeds > n_vox:
        raise ParameterError(f"n_seeds={n_seeds} exceeds voxel count {n_vox}")
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    flat = rng.choice(n_vox, size=n_seeds, replace=False)
    seeds = np.stack(np.unravel_index(flat, dims), axis=1).astype(np.float64)
    labels = voronoi_labels(dims, seeds)
    intensity = np.where(boundary_mask(labels), BOUNDARY_VALUE, INTERIOR_VALUE)
    if sigma > 0:
        intensity = intensity + rng.normal(0.0, sigma, size=dims)
    return intensity, labels
