"""Overlapping-block inference with uniform blending."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .errors import ShapeError

log = logging.getLogger(__name__)


def axis_origins(n: int, block: int) -> List[int]:
    """Start offsets along one axis; stride is ``block - block // 2`` and the
    last block is snapped to end at ``n``."""
    stride = max(block - block // 2, 1)
    origins = list(range(0, n - block + 1, stride))
    if origins[-1] + block < n:
        origins.append(n - block)
    return origins


@dataclass(frozen=True)
class TilePlan:
    dims: Tuple[int, int, int]
    block: Tuple[int, int, int]
    origins: Tuple[Tuple[int, int, int], ...]
    axis_origins: Tuple[Tuple[int, ...], ...]

    @property
    def stride(self) -> Tuple[int, int, int]:
        return tuple(b - b // 2 for b in self.block)

    @property
    def overlap(self) -> Tuple[int, int, int]:
        return tuple(b // 2 for b in self.block)

    def coverage(self) -> np.ndarray:
        """Number of tiles covering each voxel, ``(D, H, W)``."""
        per_axis = []
        for n, b, org in zip(self.dims, self.block, self.axis_origins):
            c = np.zeros(n, dtype=np.int64)
            for o in org:
                c[o:o + b] += 1
            per_axis.append(c)
        return per_axis[0][:, None, None] * per_axis[1][None, :, None] * per_axis[2][None, None, :]

    def weights(self) -> np.ndarray:
        """Per-voxel weight each covering tile contributes (uniform averaging)."""
        return 1.0 / self.coverage()

    def slices(self, origin) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, o + b) for o, b in zip(origin, self.block))


def tile_plan(dims: Sequence[int], block: Sequence[int]) -> TilePlan:
    dims = tuple(int(n) for n in dims)
    block = tuple(int(b) for b in block)
    if len(dims) != 3 or min(dims) < 1:
        raise ShapeError(f"cannot tile an empty volume of dims {dims}")
    if len(block) != 3 or min(block) < 1:
        raise ShapeError(f"block must be three positive extents, got {block}")
    if any(b > n for b, n in zip(block, dims)):
        clamped = tuple(min(b, n) for b, n in zip(block, dims))
        log.warning("block %s exceeds volume %s; clamped to %s", block, dims, clamped)
        block = clamped
    per_axis = tuple(tuple(axis_origins(n, b)) for n, b in zip(dims, block))
    return TilePlan(dims, block, tuple(itertools.product(*per_axis)), per_axis)


def predict_tiled(volume: np.ndarray, predict: Callable[[np.ndarray], np.ndarray],
                  plan: TilePlan, threads: int = 1) -> np.ndarray:
    """Run ``predict`` on every tile and average overlapping outputs.

    Tiles may be evaluated concurrently; accumulation runs in tile order so
    the result does not depend on ``threads``.
    """
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim == 3:
        volume = volume[None]
    if tuple(volume.shape[1:]) != plan.dims:
        raise ShapeError(f"volume dims {volume.shape[1:]} do not match plan {plan.dims}")
    crops = [volume[(slice(None),) + plan.slices(o)] for o in plan.origins]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(predict, crops))
    else:
        outputs = [predict(c) for c in crops]
    weights = plan.weights()
    out = None
    for origin, pred in zip(plan.origins, outputs):
        sl = plan.slices(origin)
        if out is None:
            out = np.zeros((pred.shape[0],) + plan.dims)
        out[(slice(None),) + sl] += pred * weights[sl]
    return out
