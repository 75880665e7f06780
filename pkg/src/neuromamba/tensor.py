"""Dense float64 tensor ops: 3D/1D convolution, instance norm, activations.

Arrays are channel-first: volumes are ``(C, D, H, W)`` and sequences are
``(C, L)``, C-contiguous float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import _accel
from ._accel import njit
from .errors import ShapeError

AXES_3D = ("depth", "height", "width")


@dataclass
class Volume:
    """Channel-first volume with optional voxel resolution ``(R_a, R_t)`` in nm."""

    data: np.ndarray
    resolution: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ShapeError(f"volume must be rank 3 or 4, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"volume extents must be >= 1, got {data.shape}")
        self.data = data
        if self.resolution is not None:
            ra, rt = (float(v) for v in self.resolution)
            self.resolution = (ra, rt)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape


@dataclass
class ConvSpec:
    """Weights and geometry of a convolution.

    ``weight`` is ``(out, in, kd, kh, kw)`` for 3D or ``(out, in, k)`` for 1D.
    ``padding`` and ``stride`` are per spatial axis; scalars are broadcast.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    padding: Sequence[int] | int = 0
    stride: Sequence[int] | int = 1
    ndim: int = field(init=False)

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        if self.weight.ndim not in (3, 5):
            raise ShapeError(f"conv weight must be rank 3 (1D) or 5 (3D), got {self.weight.ndim}")
        self.ndim = self.weight.ndim - 2
        if self.bias is None:
            self.bias = np.zeros(self.out_channels)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias length {self.bias.shape} != out channels {self.out_channels}")
        self.padding = _per_axis(self.padding, self.ndim, "padding")
        self.stride = _per_axis(self.stride, self.ndim, "stride")
        if any(p < 0 for p in self.padding):
            raise ShapeError(f"negative padding {self.padding}")
        if any(s < 1 for s in self.stride):
            raise ShapeError(f"stride must be >= 1, got {self.stride}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> Tuple[int, ...]:
        return tuple(self.weight.shape[2:])

    def output_extents(self, extents: Sequence[int]) -> Tuple[int, ...]:
        names = AXES_3D if self.ndim == 3 else ("length",)
        out = []
        for name, n, k, p, s in zip(names, extents, self.kernel, self.padding, self.stride):
            m = (n + 2 * p - k) // s + 1
            if n + 2 * p < k or m < 1:
                raise ShapeError(
                    f"{name} axis: extent {n} with padding {p} is smaller than kernel {k}"
                )
            out.append(m)
        return tuple(out)


def _per_axis(value, ndim, what):
    if np.isscalar(value):
        return (int(value),) * ndim
    value = tuple(int(v) for v in value)
    if len(value) != ndim:
        raise ShapeError(f"{what} needs {ndim} entries, got {value}")
    return value


def xavier_uniform(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Uniform on (-a, a), a = sqrt(6 / (fan_in + fan_out)); shape is (out, in, *kernel)."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=tuple(shape))


def init_conv3d(rng, c_in, c_out, kernel=3, padding=None, stride=1) -> ConvSpec:
    kernel = _per_axis(kernel, 3, "kernel")
    if padding is None:
        padding = tuple(k // 2 for k in kernel)
    return ConvSpec(xavier_uniform(rng, (c_out, c_in) + kernel), np.zeros(c_out), padding, stride)


def init_conv1d(rng, c_in, c_out, kernel=3, padding=None) -> ConvSpec:
    if padding is None:
        padding = kernel // 2
    return ConvSpec(xavier_uniform(rng, (c_out, c_in, kernel)), np.zeros(c_out), padding, 1)


# ---------------------------------------------------------------------------
# 3D convolution kernels


@njit
def _conv3d_nb(xp, w, b, sd, sh, sw, out):
    c_out, c_in, kd, kh, kw = w.shape
    _, od, oh, ow = out.shape
    for o in range(c_out):
        out[o] = b[o]
        for i in range(c_in):
            for a in range(kd):
                for bb in range(kh):
                    for c in range(kw):
                        wv = w[o, i, a, bb, c]
                        for d in range(od):
                            for h in range(oh):
                                src = xp[i, d * sd + a, h * sh + bb]
                                dst = out[o, d, h]
                                for x in range(ow):
                                    dst[x] += wv * src[x * sw + c]
    return out


def _conv3d_np(xp, w, b, stride, out_ext):
    c_out, c_in, kd, kh, kw = w.shape
    sd, sh, sw = stride
    od, oh, ow = out_ext
    n = od * oh * ow
    out = np.zeros((c_out, n))
    for a in range(kd):
        for bb in range(kh):
            for c in range(kw):
                patch = xp[:, a:a + sd * (od - 1) + 1:sd, bb:bb + sh * (oh - 1) + 1:sh,
                           c:c + sw * (ow - 1) + 1:sw]
                out += w[:, :, a, bb, c] @ patch.reshape(c_in, n)
    out += b[:, None]
    return out.reshape(c_out, od, oh, ow)


def conv3d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate a ``(C_in, D, H, W)`` volume; returns ``(C_out, D', H', W')``."""
    x = np.asarray(x, dtype=np.float64)
    if spec.ndim != 3:
        raise ShapeError("conv3d needs a 3D ConvSpec")
    if x.ndim != 4:
        raise ShapeError(f"conv3d input must be (C, D, H, W), got shape {x.shape}")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"channel axis: input has {x.shape[0]}, weights expect {spec.in_channels}")
    out_ext = spec.output_extents(x.shape[1:])
    pd, ph, pw = spec.padding
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw))) if any(spec.padding) else x
    xp = np.ascontiguousarray(xp)
    if _accel.use_jit():
        out = np.empty((spec.out_channels,) + out_ext)
        return _conv3d_nb(xp, spec.weight, spec.bias, *spec.stride, out)
    return _conv3d_np(xp, spec.weight, spec.bias, spec.stride, out_ext)


def conv1d(v: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate a ``(C_in, L)`` sequence; the same spec works for any L."""
    v = np.asarray(v, dtype=np.float64)
    if spec.ndim != 1:
        raise ShapeError("conv1d needs a 1D ConvSpec")
    if v.ndim == 1:
        v = v[None]
    if v.ndim != 2:
        raise ShapeError(f"conv1d input must be (C, L), got shape {v.shape}")
    if v.shape[1] == 0:
        raise ShapeError("conv1d on an empty sequence")
    if v.shape[0] != spec.in_channels:
        raise ShapeError(f"channel axis: input has {v.shape[0]}, weights expect {spec.in_channels}")
    (lo,) = spec.output_extents(v.shape[1:])
    (p,), (s,) = spec.padding, spec.stride
    vp = np.pad(v, ((0, 0), (p, p)))
    out = np.zeros((spec.out_channels, lo))
    for k in range(spec.kernel[0]):
        out += spec.weight[:, :, k] @ vp[:, k:k + s * (lo - 1) + 1:s]
    return out + spec.bias[:, None]


def instance_norm(x: np.ndarray, gamma=None, beta=None, eps: float = 1e-5) -> np.ndarray:
    """Normalize each channel over all of its non-channel positions.

    Uses the population variance.  ``eps == 0`` is accepted; a constant channel
    then maps to ``beta``.
    """
    x = np.asarray(x, dtype=np.float64)
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    c = x.shape[0]
    flat = x.reshape(c, -1)
    mean = flat.mean(axis=1, keepdims=True)
    centered = flat - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    denom = np.sqrt(var + eps)
    normed = np.divide(centered, denom, out=np.zeros_like(centered), where=denom > 0)
    gamma = np.ones(c) if gamma is None else np.broadcast_to(np.asarray(gamma, dtype=np.float64), (c,))
    beta = np.zeros(c) if beta is None else np.broadcast_to(np.asarray(beta, dtype=np.float64), (c,))
    return (normed * gamma[:, None] + beta[:, None]).reshape(x.shape)


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # exp(-logaddexp(0, -x)) never overflows
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(x):
    return np.logaddexp(0.0, x)


def silu(x):
    return x * sigmoid(x)


_POINTWISE = {"relu": relu, "sigmoid": sigmoid}


def pointwise(x, kind: str):
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}; expected relu or sigmoid") from None
    return fn(x)
