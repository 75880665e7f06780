"""3D -> 1D serialization orders and their locality diagnostics.

A ``ScanOrder`` holds ``perm`` (sequence position -> flat voxel index, with
flat index ``d*H*W + h*W + w``) and its inverse.  Orders are cached and
immutable (the arrays are marked read-only).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ParameterError, ShapeError


class Variant(str, enum.Enum):
    TRANSVERSE_PRIMARY = "transverse-primary"  # w fastest, then h, then d
    TRANSVERSE_CROSS = "transverse-cross"  # h fastest, then w, then d
    AXIAL_PRIMARY = "axial-primary"  # d fastest, then w, then h
    AXIAL_CROSS = "axial-cross"  # d fastest, then h, then w
    HILBERT3D = "hilbert3d"


# axes of the (d, h, w) index grid listed from slowest to fastest
_NESTING = {
    Variant.TRANSVERSE_PRIMARY: (0, 1, 2),
    Variant.TRANSVERSE_CROSS: (0, 2, 1),
    Variant.AXIAL_PRIMARY: (1, 2, 0),
    Variant.AXIAL_CROSS: (2, 1, 0),
}

REVERSE_PREFIX = "reverse:"

# Branch groups of the ablation rows: '*' transverse-first, '+' axial-first.
SCAN_PRESETS: Dict[str, Tuple[str, ...]] = {
    "uni*": ("transverse-primary",),
    "uni+": ("axial-primary",),
    "uni*+uni+": ("transverse-primary", "axial-primary"),
    "bi*": ("transverse-primary", "reverse:transverse-primary"),
    "bi+": ("axial-primary", "reverse:axial-primary"),
    "bi*+bi+": ("transverse-primary", "reverse:transverse-primary",
                "axial-primary", "reverse:axial-primary"),
    "cro*": ("transverse-primary", "transverse-cross"),
    "cro+": ("axial-primary", "axial-cross"),
    "cro*+cro+": ("transverse-primary", "transverse-cross", "axial-primary", "axial-cross"),
    "hilbert": ("hilbert3d",),
}
DEFAULT_SCAN = SCAN_PRESETS["cro*+cro+"]


def parse_variant(name: str) -> Tuple[Variant, bool]:
    """Split ``"reverse:axial-cross"`` into ``(Variant.AXIAL_CROSS, True)``."""
    reverse = False
    name = name.strip()
    while name.startswith(REVERSE_PREFIX):
        name = name[len(REVERSE_PREFIX):]
        reverse = not reverse
    try:
        return Variant(name), reverse
    except ValueError:
        known = ", ".join(v.value for v in Variant)
        raise ParameterError(f"unknown scan variant {name!r}; known: {known}") from None


def variant_name(variant: Variant, reverse: bool = False) -> str:
    return (REVERSE_PREFIX if reverse else "") + Variant(variant).value


def expand_scan_list(items: Sequence[str] | str) -> Tuple[str, ...]:
    """Resolve preset names and comma-separated variant lists into variant names."""
    if isinstance(items, str):
        items = [s for s in items.split(",") if s.strip()]
    out: List[str] = []
    for item in items:
        item = item.strip()
        if item in SCAN_PRESETS:
            out.extend(SCAN_PRESETS[item])
        else:
            v, rev = parse_variant(item)
            out.append(variant_name(v, rev))
    if not out:
        raise ParameterError("empty scan variant list")
    return tuple(out)


def orientation(name: str) -> str:
    """``"transverse"``, ``"axial"`` or ``"neutral"`` (Hilbert) for a variant name."""
    v, _ = parse_variant(name)
    if v in (Variant.TRANSVERSE_PRIMARY, Variant.TRANSVERSE_CROSS):
        return "transverse"
    if v in (Variant.AXIAL_PRIMARY, Variant.AXIAL_CROSS):
        return "axial"
    return "neutral"


@dataclass(frozen=True)
class ScanOrder:
    dims: Tuple[int, int, int]
    variant: str
    perm: np.ndarray
    inv: np.ndarray

    @property
    def size(self) -> int:
        return self.perm.shape[0]

    def coords(self) -> np.ndarray:
        """Visited ``(d, h, w)`` coordinates in sequence order, shape ``(N, 3)``."""
        return np.stack(np.unravel_index(self.perm, self.dims), axis=1)


def _check_dims(dims) -> Tuple[int, int, int]:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3:
        raise ShapeError(f"scan dims must be (D, H, W), got {dims}")
    for axis, n in zip(("depth", "height", "width"), dims):
        if n < 1:
            raise ShapeError(f"{axis} axis has extent {n}; scan orders need >= 1")
    return dims


def build_order(variant: str | Variant, dims: Sequence[int]) -> ScanOrder:
    dims = _check_dims(dims)
    v, rev = parse_variant(variant.value if isinstance(variant, Variant) else variant)
    return _build_cached(v, rev, dims)


@lru_cache(maxsize=256)
def _build_cached(v: Variant, rev: bool, dims: Tuple[int, int, int]) -> ScanOrder:
    if v is Variant.HILBERT3D:
        perm = hilbert3d_perm(dims)
    else:
        grid = np.arange(int(np.prod(dims)), dtype=np.int64).reshape(dims)
        perm = np.ascontiguousarray(grid.transpose(_NESTING[v]).ravel())
    if rev:
        perm = np.ascontiguousarray(perm[::-1])
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.shape[0], dtype=np.int64)
    perm.setflags(write=False)
    inv.setflags(write=False)
    return ScanOrder(dims, variant_name(v, rev), perm, inv)


def reverse(order: ScanOrder) -> ScanOrder:
    v, rev = parse_variant(order.variant)
    return _build_cached(v, not rev, order.dims)


# ---------------------------------------------------------------------------
# Generalized Hilbert curve for arbitrary boxes (recursive "gilbert" split)


def _sgn(x: int) -> int:
    return (x > 0) - (x < 0)


def _gilbert3d(out, x, y, z, ax, ay, az, bx, by, bz, cx, cy, cz):
    # (a, b, c) are the box's major / forward / up edge vectors; x maps to
    # width, y to height, z to depth.
    w = abs(ax + ay + az)
    h = abs(bx + by + bz)
    d = abs(cx + cy + cz)
    dax, day, daz = _sgn(ax), _sgn(ay), _sgn(az)
    dbx, dby, dbz = _sgn(bx), _sgn(by), _sgn(bz)
    dcx, dcy, dcz = _sgn(cx), _sgn(cy), _sgn(cz)

    if h == 1 and d == 1:
        for _ in range(w):
            out.append((z, y, x))
            x, y, z = x + dax, y + day, z + daz
        return
    if w == 1 and d == 1:
        for _ in range(h):
            out.append((z, y, x))
            x, y, z = x + dbx, y + dby, z + dbz
        return
    if w == 1 and h == 1:
        for _ in range(d):
            out.append((z, y, x))
            x, y, z = x + dcx, y + dcy, z + dcz
        return

    ax2, ay2, az2 = ax // 2, ay // 2, az // 2
    bx2, by2, bz2 = bx // 2, by // 2, bz // 2
    cx2, cy2, cz2 = cx // 2, cy // 2, cz // 2
    w2 = abs(ax2 + ay2 + az2)
    h2 = abs(bx2 + by2 + bz2)
    d2 = abs(cx2 + cy2 + cz2)

    # prefer even halves so sub-curves end on the right corner
    if w2 % 2 and w > 2:
        ax2, ay2, az2 = ax2 + dax, ay2 + day, az2 + daz
    if h2 % 2 and h > 2:
        bx2, by2, bz2 = bx2 + dbx, by2 + dby, bz2 + dbz
    if d2 % 2 and d > 2:
        cx2, cy2, cz2 = cx2 + dcx, cy2 + dcy, cz2 + dcz

    if 2 * w > 3 * h and 2 * w > 3 * d:
        # long box: split along a only
        _gilbert3d(out, x, y, z, ax2, ay2, az2, bx, by, bz, cx, cy, cz)
        _gilbert3d(out, x + ax2, y + ay2, z + az2,
                   ax - ax2, ay - ay2, az - az2, bx, by, bz, cx, cy, cz)
    elif 3 * h > 4 * d:
        # flat box: split along a and b, keep c whole
        _gilbert3d(out, x, y, z, bx2, by2, bz2, cx, cy, cz, ax2, ay2, az2)
        _gilbert3d(out, x + bx2, y + by2, z + bz2,
                   ax, ay, az, bx - bx2, by - by2, bz - bz2, cx, cy, cz)
        _gilbert3d(out, x + (ax - dax) + (bx2 - dbx), y + (ay - day) + (by2 - dby),
                   z + (az - daz) + (bz2 - dbz),
                   -bx2, -by2, -bz2, cx, cy, cz, -(ax - ax2), -(ay - ay2), -(az - az2))
    elif 3 * d > 4 * h:
        # tall box: split along a and c, keep b whole
        _gilbert3d(out, x, y, z, cx2, cy2, cz2, ax2, ay2, az2, bx, by, bz)
        _gilbert3d(out, x + cx2, y + cy2, z + cz2,
                   ax, ay, az, bx, by, bz, cx - cx2, cy - cy2, cz - cz2)
        _gilbert3d(out, x + (ax - dax) + (cx2 - dcx), y + (ay - day) + (cy2 - dcy),
                   z + (az - daz) + (cz2 - dcz),
                   -cx2, -cy2, -cz2, -(ax - ax2), -(ay - ay2), -(az - az2), bx, by, bz)
    else:
        # regular box: split along all three edges
        _gilbert3d(out, x, y, z, bx2, by2, bz2, cx2, cy2, cz2, ax2, ay2, az2)
        _gilbert3d(out, x + bx2, y + by2, z + bz2,
                   cx, cy, cz, ax2, ay2, az2, bx - bx2, by - by2, bz - bz2)
        _gilbert3d(out, x + (bx2 - dbx) + (cx - dcx), y + (by2 - dby) + (cy - dcy),
                   z + (bz2 - dbz) + (cz - dcz),
                   ax, ay, az, -bx2, -by2, -bz2, -(cx - cx2), -(cy - cy2), -(cz - cz2))
        _gilbert3d(out, x + (ax - dax) + bx2 + (cx - dcx), y + (ay - day) + by2 + (cy - dcy),
                   z + (az - daz) + bz2 + (cz - dcz),
                   -cx, -cy, -cz, -(ax - ax2), -(ay - ay2), -(az - az2), bx - bx2, by - by2, bz - bz2)
        _gilbert3d(out, x + (ax - dax) + (bx2 - dbx), y + (ay - day) + (by2 - dby),
                   z + (az - daz) + (bz2 - dbz),
                   -bx2, -by2, -bz2, cx2, cy2, cz2, -(ax - ax2), -(ay - ay2), -(az - az2))


def hilbert3d_coords(dims: Sequence[int]) -> np.ndarray:
    """Visit order of a generalized 3D Hilbert curve as ``(N, 3)`` ``(d, h, w)`` rows."""
    depth, height, width = _check_dims(dims)
    out: List[Tuple[int, int, int]] = []
    if width >= height and width >= depth:
        _gilbert3d(out, 0, 0, 0, width, 0, 0, 0, height, 0, 0, 0, depth)
    elif height >= width and height >= depth:
        _gilbert3d(out, 0, 0, 0, 0, height, 0, width, 0, 0, 0, 0, depth)
    else:
        _gilbert3d(out, 0, 0, 0, 0, 0, depth, width, 0, 0, 0, height, 0)
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)


def hilbert3d_perm(dims: Sequence[int]) -> np.ndarray:
    dims = _check_dims(dims)
    c = hilbert3d_coords(dims)
    return np.ascontiguousarray(np.ravel_multi_index((c[:, 0], c[:, 1], c[:, 2]), dims))


# ---------------------------------------------------------------------------
# applying orders


def flatten(x: np.ndarray, order: ScanOrder) -> np.ndarray:
    """``(C, D, H, W)`` volume -> ``(C, N)`` sequence in scan order."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != order.dims:
        raise ShapeError(f"volume dims {tuple(x.shape[1:])} do not match order dims {order.dims}")
    return x.reshape(x.shape[0], -1)[:, order.perm]


def unflatten(seq: np.ndarray, order: ScanOrder) -> np.ndarray:
    seq = np.asarray(seq)
    if seq.ndim == 1:
        seq = seq[None]
    if seq.shape[1] != order.size:
        raise ShapeError(f"sequence length {seq.shape[1]} != order size {order.size}")
    return seq[:, order.inv].reshape((seq.shape[0],) + order.dims)


@dataclass
class ScanSequences:
    """The flattened branches of one volume, keyed by variant name."""

    orders: Tuple[ScanOrder, ...]
    sequences: Tuple[np.ndarray, ...]

    @classmethod
    def from_volume(cls, x: np.ndarray, variants: Sequence[str] = DEFAULT_SCAN) -> "ScanSequences":
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        orders = tuple(build_order(v, x.shape[1:]) for v in variants)
        return cls(orders, tuple(flatten(x, o) for o in orders))

    def restore(self, i: int) -> np.ndarray:
        return unflatten(self.sequences[i], self.orders[i])


def locality_metrics(order: ScanOrder) -> Dict[str, float]:
    """Manhattan jump statistics between consecutively visited voxels."""
    if order.size < 2:
        return {"mean_jump": 0.0, "p95_jump": 0.0, "adjacent_fraction": 1.0}
    jumps = np.abs(np.diff(order.coords(), axis=0)).sum(axis=1)
    return {
        "mean_jump": float(jumps.mean()),
        "p95_jump": float(np.percentile(jumps, 95)),
        "adjacent_fraction": float(np.mean(jumps == 1)),
    }


def jumps(order: ScanOrder) -> np.ndarray:
    return np.abs(np.diff(order.coords(), axis=0)).sum(axis=1)
