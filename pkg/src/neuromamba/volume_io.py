"""JSON-sidecar volume files.

``name.json`` holds the header, ``name.raw`` (or the header's ``payload``
entry, relative to the header) holds the little-endian array in ``(c, z, y, x)``
order::

    {"dims": [D, H, W], "channels": C, "dtype": "f64" | "u64",
     "resolution": [R_a, R_t] | null, "axis_order": "zyx", "payload": "name.raw"}
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import MalformedHeaderError, MissingFileError

DTYPES = {"f64": np.dtype("<f8"), "u64": np.dtype("<u8")}


@dataclass
class VolumeHeader:
    dims: Tuple[int, int, int]
    channels: int
    dtype: str
    resolution: Optional[Tuple[float, float]] = None
    axis_order: str = "zyx"
    payload: str = ""

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.dims)) * self.channels * DTYPES[self.dtype].itemsize

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "channels": self.channels,
            "dtype": self.dtype,
            "resolution": list(self.resolution) if self.resolution is not None else None,
            "axis_order": self.axis_order,
            "payload": self.payload,
        }


def _header_path(path) -> Path:
    path = Path(path)
    return path if path.suffix == ".json" else path.with_suffix(".json")


def write_volume(path, array: np.ndarray, resolution=None) -> Path:
    """Write ``array`` (``(D, H, W)`` or ``(C, D, H, W)``); float -> f64, integer -> u64."""
    array = np.asarray(array)
    if array.ndim == 3:
        array = array[None]
    if array.ndim != 4:
        raise MalformedHeaderError(f"volume must be rank 3 or 4, got {array.shape}")
    if np.issubdtype(array.dtype, np.integer) or array.dtype == bool:
        if np.issubdtype(array.dtype, np.signedinteger) and array.size and array.min() < 0:
            raise MalformedHeaderError("label volumes must be non-negative")
        tag = "u64"
    else:
        tag = "f64"
    header_path = _header_path(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    payload = header_path.with_suffix(".raw")
    header = VolumeHeader(tuple(int(n) for n in array.shape[1:]), int(array.shape[0]), tag,
                          None if resolution is None else tuple(float(r) for r in resolution),
                          "zyx", payload.name)
    payload.write_bytes(np.ascontiguousarray(array, dtype=DTYPES[tag]).tobytes())
    header_path.write_text(json.dumps(header.to_json(), indent=2) + "\n")
    return header_path


def read_header(path) -> VolumeHeader:
    header_path = _header_path(path)
    if not header_path.exists():
        raise MissingFileError(f"volume header not found: {header_path}")
    try:
        raw = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{header_path}: not valid JSON ({exc})") from None
    try:
        dims = tuple(int(n) for n in raw["dims"])
        channels = int(raw.get("channels", 1))
        dtype = raw["dtype"]
        res = raw.get("resolution")
        axis_order = raw.get("axis_order", "zyx")
        payload = raw.get("payload") or header_path.with_suffix(".raw").name
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"{header_path}: bad or missing field ({exc})") from None
    if len(dims) != 3 or min(dims) < 1 or channels < 1:
        raise MalformedHeaderError(f"{header_path}: invalid dims {dims} / channels {channels}")
    if dtype not in DTYPES:
        raise MalformedHeaderError(f"{header_path}: dtype must be f64 or u64, got {dtype!r}")
    if axis_order != "zyx":
        raise MalformedHeaderError(f"{header_path}: axis_order must be 'zyx', got {axis_order!r}")
    if res is not None:
        try:
            res = tuple(float(r) for r in res)
        except (TypeError, ValueError):
            raise MalformedHeaderError(f"{header_path}: bad resolution {res!r}") from None
        if len(res) != 2 or min(res) <= 0:
            raise MalformedHeaderError(f"{header_path}: resolution must be two positive numbers")
    return VolumeHeader(dims, channels, dtype, res, axis_order, payload)


def read_volume(path) -> Tuple[np.ndarray, VolumeHeader]:
    """Returns the ``(C, D, H, W)`` array and its header."""
    header = read_header(path)
    payload = _header_path(path).parent / header.payload
    if not payload.exists():
        raise MissingFileError(f"volume payload not found: {payload}")
    buf = payload.read_bytes()
    if len(buf) != header.nbytes:
        raise MalformedHeaderError(
            f"{payload}: payload has {len(buf)} bytes, header implies {header.nbytes}"
        )
    arr = np.frombuffer(buf, dtype=DTYPES[header.dtype]).reshape((header.channels,) + header.dims)
    return arr.astype(DTYPES[header.dtype].newbyteorder("="), copy=True), header
