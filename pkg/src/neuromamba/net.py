"""MPFI block (strip-gated local branch, resolution-weighted scan branch,
cross-modulation fusion) and the U-shaped affinity network built from it.

Parameters live in a flat ``dict[str, ndarray]`` keyed by dotted names so a
model can be written to and read from a checkpoint without extra plumbing.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import MalformedHeaderError, MissingFileError, ParameterError, ShapeError
from .scan_orders import DEFAULT_SCAN, build_order, expand_scan_list, flatten, orientation, unflatten
from .ssm import MambaParams, mamba_block
from .tensor import (ConvSpec, Volume, conv1d, conv3d, init_conv1d, init_conv3d, instance_norm,
                     relu, sigmoid)

Params = Dict[str, np.ndarray]

# default anisotropy schedule
DEFAULT_ALPHA = 0.04
DEFAULT_BETA = 0.6
IN_EPS = 1e-5


@dataclass(frozen=True)
class StripFeatures:
    y_d: np.ndarray  # (C, D)
    y_h: np.ndarray  # (C, H)
    y_w: np.ndarray  # (C, W)


@dataclass(frozen=True)
class GateVectors:
    z_d: np.ndarray
    z_h: np.ndarray
    z_w: np.ndarray


@dataclass(frozen=True)
class ResolutionPrior:
    """Voxel resolution (nm) plus the affine schedule mapping anisotropy to branch weights."""

    R_a: float
    R_t: float
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not (self.R_a > 0 and self.R_t > 0):
            raise ParameterError(f"resolutions must be positive, got R_a={self.R_a}, R_t={self.R_t}")

    @property
    def d_ani(self) -> float:
        return self.R_a / self.R_t

    @property
    def lambdas(self) -> Tuple[float, float]:
        return compute_lambdas(self)


def compute_lambdas(prior: ResolutionPrior) -> Tuple[float, float]:
    """``(lambda1, lambda2)`` with ``lambda2 = clip(alpha * R_a / R_t + beta, 0, 2)``
    and ``lambda1 = 2 - lambda2``."""
    if not (prior.R_a > 0 and prior.R_t > 0):
        raise ParameterError("resolutions must be positive")
    lam2 = min(max(prior.alpha * prior.d_ani + prior.beta, 0.0), 2.0)
    return 2.0 - lam2, lam2


@dataclass
class MpfiIntermediates:
    I_prime: Optional[np.ndarray] = None
    strips: Optional[StripFeatures] = None
    gates: Optional[GateVectors] = None
    X_local: Optional[np.ndarray] = None
    X_global: Optional[np.ndarray] = None
    X_local_mod: Optional[np.ndarray] = None
    X_global_mod: Optional[np.ndarray] = None
    O_mpfi: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# parameter helpers


def _conv(params: Params, name: str, padding="same", stride=1) -> ConvSpec:
    w = params[name + ".weight"]
    if padding == "same":
        padding = tuple(k // 2 for k in w.shape[2:])
    return ConvSpec(w, params[name + ".bias"], padding, stride)


def _put_conv(params: Params, name: str, spec: ConvSpec):
    params[name + ".weight"] = spec.weight
    params[name + ".bias"] = spec.bias


def _norm(params: Params, name: str, x: np.ndarray) -> np.ndarray:
    return instance_norm(x, params[name + ".gamma"], params[name + ".beta"], IN_EPS)


def _put_norm(params: Params, name: str, channels: int):
    params[name + ".gamma"] = np.ones(channels)
    params[name + ".beta"] = np.zeros(channels)


def _sub(params: Params, prefix: str) -> Params:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# local branch


def strip_pool(x: np.ndarray) -> StripFeatures:
    """Per-channel means over the plane orthogonal to each axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    return StripFeatures(y_d=x.mean(axis=(2, 3)), y_h=x.mean(axis=(1, 3)), y_w=x.mean(axis=(1, 2)))


def init_bdfe(rng: np.random.Generator, channels: int, gate_kernel: int = 3) -> Params:
    p: Params = {}
    _put_conv(p, "conv_a", init_conv3d(rng, channels, channels))
    _put_norm(p, "norm_a", channels)
    _put_conv(p, "conv_b", init_conv3d(rng, channels, channels))
    _put_conv(p, "gate_conv", init_conv1d(rng, channels, channels, gate_kernel))
    _put_norm(p, "gate_norm", channels)
    return p


def gate_vectors(strips: StripFeatures, params: Params) -> GateVectors:
    """Shared 1D conv, instance norm over the strip length, then sigmoid."""
    spec = _conv(params, "gate_conv")

    def one(y):
        return sigmoid(_norm(params, "gate_norm", conv1d(y, spec)))

    return GateVectors(one(strips.y_d), one(strips.y_h), one(strips.y_w))


def apply_gates(I_prime: np.ndarray, gates: GateVectors) -> np.ndarray:
    return (I_prime * gates.z_d[:, :, None, None] * gates.z_h[:, None, :, None]
            * gates.z_w[:, None, None, :])


def bdfe_forward(I: np.ndarray, params: Params, gates: Optional[GateVectors] = None,
                 record: Optional[MpfiIntermediates] = None) -> np.ndarray:
    """Local boundary branch.  ``gates`` overrides the computed gate vectors."""
    h = relu(_norm(params, "norm_a", conv3d(I, _conv(params, "conv_a"))))
    I_prime = conv3d(h, _conv(params, "conv_b"))
    strips = strip_pool(I_prime)
    if gates is None:
        gates = gate_vectors(strips, params)
    else:
        c = I_prime.shape[0]
        gates = GateVectors(*(np.broadcast_to(z, (c, n)) for z, n in
                              zip((gates.z_d, gates.z_h, gates.z_w), I_prime.shape[1:])))
    X_local = apply_gates(I_prime, gates)
    if record is not None:
        record.I_prime, record.strips, record.gates, record.X_local = I_prime, strips, gates, X_local
    return X_local


# ---------------------------------------------------------------------------
# global branch


def branch_weight(variant: str, lambdas: Tuple[float, float]) -> float:
    kind = orientation(variant)
    if kind == "transverse":
        return lambdas[0]
    if kind == "axial":
        return lambdas[1]
    return 1.0


def scfe_branches(x: np.ndarray, mixer: MambaParams, variants: Sequence[str] = DEFAULT_SCAN,
                  chunk: Optional[int] = None) -> List[np.ndarray]:
    """Mixer output of every scan branch, each mapped back to volume layout."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for v in variants:
        order = build_order(v, x.shape[1:])
        seq = flatten(x, order).T  # (N, C)
        out.append(unflatten(mamba_block(seq, mixer, chunk=chunk).T, order))
    return out


def combine_branches(branches: Sequence[np.ndarray], variants: Sequence[str],
                     lambdas: Tuple[float, float]) -> np.ndarray:
    total = np.zeros_like(branches[0])
    for b, v in zip(branches, variants):
        total += branch_weight(v, lambdas) * b
    return total


def scfe_forward(x: np.ndarray, mixer: MambaParams, prior: ResolutionPrior | Tuple[float, float],
                 variants: Sequence[str] = DEFAULT_SCAN, chunk: Optional[int] = None) -> np.ndarray:
    """``lambda1 * sum(transverse branches) + lambda2 * sum(axial branches)``.

    ``prior`` may also be an explicit ``(lambda1, lambda2)`` pair.
    """
    lambdas = prior.lambdas if isinstance(prior, ResolutionPrior) else tuple(prior)
    variants = expand_scan_list(variants)
    return combine_branches(scfe_branches(x, mixer, variants, chunk), variants, lambdas)


# ---------------------------------------------------------------------------
# fusion and block


def cfi_forward(X_local: np.ndarray, X_global: np.ndarray,
                record: Optional[MpfiIntermediates] = None) -> np.ndarray:
    X_local = np.asarray(X_local, dtype=np.float64)
    X_global = np.asarray(X_global, dtype=np.float64)
    if X_local.shape != X_global.shape:
        raise ShapeError(f"local {X_local.shape} and global {X_global.shape} shapes differ")
    local_mod = X_local * sigmoid(X_global)
    global_mod = X_global * sigmoid(X_local)
    out = local_mod + global_mod
    if record is not None:
        record.X_local_mod, record.X_global_mod, record.O_mpfi = local_mod, global_mod, out
    return out


def init_mpfi(rng: np.random.Generator, channels: int, n_state: int = 8) -> Params:
    p = {"bdfe." + k: v for k, v in init_bdfe(rng, channels).items()}
    p.update(MambaParams.init(channels, n_state, rng=rng).state_dict("scfe."))
    return p


def mpfi_forward(x: np.ndarray, params: Params, prior: ResolutionPrior,
                 variants: Sequence[str] = DEFAULT_SCAN,
                 record: Optional[MpfiIntermediates] = None) -> np.ndarray:
    X_local = bdfe_forward(x, _sub(params, "bdfe."), record=record)
    X_global = scfe_forward(x, MambaParams.from_state(params, "scfe."), prior, variants)
    if record is not None:
        record.X_global = X_global
    return cfi_forward(X_local, X_global, record)


# ---------------------------------------------------------------------------
# encoder / decoder


@dataclass
class ModelConfig:
    widths: Tuple[int, ...] = (16, 32, 64)
    downsample: Optional[Tuple[Tuple[int, int, int], ...]] = None
    n_state: int = 8
    in_channels: int = 1
    prior: ResolutionPrior = field(default_factory=lambda: ResolutionPrior(40.0, 4.0))
    scan_variants: Tuple[str, ...] = DEFAULT_SCAN
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or any(w < 1 for w in self.widths):
            raise ParameterError(f"widths must be positive, got {self.widths}")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ParameterError(f"widths must be strictly increasing, got {self.widths}")
        if self.downsample is None:
            self.downsample = default_downsample(self.prior.d_ani, len(self.widths))
        self.downsample = tuple(tuple(int(f) for f in fs) for fs in self.downsample)
        if len(self.downsample) != len(self.widths):
            raise ParameterError("need one downsample factor triple per stage")
        if any(f < 1 for fs in self.downsample for f in fs):
            raise ParameterError(f"downsample factors must be >= 1, got {self.downsample}")
        self.scan_variants = expand_scan_list(self.scan_variants)

    @property
    def total_factor(self) -> Tuple[int, int, int]:
        return tuple(int(np.prod([fs[a] for fs in self.downsample])) for a in range(3))

    def check_extents(self, dims: Sequence[int]):
        dims = tuple(dims)
        for stage, fs in enumerate(self.downsample):
            for axis, (n, f) in enumerate(zip(dims, fs)):
                if n % f:
                    name = ("depth", "height", "width")[axis]
                    raise ShapeError(
                        f"stage {stage}: {name} extent {n} not divisible by downsample factor {f}"
                    )
            dims = tuple(n // f for n, f in zip(dims, fs))


def default_downsample(d_ani: float, stages: int = 3) -> Tuple[Tuple[int, int, int], ...]:
    """Anisotropic data keeps full depth for all but the last stage."""
    if d_ani >= 2:
        return ((1, 2, 2),) * (stages - 1) + ((2, 2, 2),)
    return ((2, 2, 2),) * stages


def init_encoder(rng, c_in: int, width: int, factor, n_state: int) -> Params:
    p: Params = {}
    _put_conv(p, "stem", init_conv3d(rng, c_in, width))
    _put_norm(p, "stem_norm", width)
    p.update({"mpfi." + k: v for k, v in init_mpfi(rng, width, n_state).items()})
    _put_conv(p, "down", init_conv3d(rng, width, width, kernel=factor, padding=0, stride=factor))
    return p


def encoder_block(x: np.ndarray, params: Params, factor: Sequence[int], prior: ResolutionPrior,
                  variants: Sequence[str] = DEFAULT_SCAN) -> Tuple[np.ndarray, np.ndarray]:
    """Stem conv, MPFI, strided-conv downsample.  Returns ``(features, skip)``."""
    for axis, (n, f) in enumerate(zip(np.shape(x)[1:], factor)):
        if n % f:
            raise ShapeError(f"{('depth', 'height', 'width')[axis]} extent {n} not divisible by {f}")
    h = relu(_norm(params, "stem_norm", conv3d(x, _conv(params, "stem"))))
    skip = mpfi_forward(h, _sub(params, "mpfi."), prior, variants)
    down = conv3d(skip, _conv(params, "down", padding=0, stride=tuple(factor)))
    return down, skip


def upsample_nearest(x: np.ndarray, factor: Sequence[int]) -> np.ndarray:
    for axis, f in enumerate(factor, start=1):
        if f > 1:
            x = np.repeat(x, f, axis=axis)
    return x


def init_decoder(rng, c_in: int, c_skip: int, width: int) -> Params:
    p: Params = {}
    _put_conv(p, "conv1", init_conv3d(rng, c_in + c_skip, width))
    _put_norm(p, "norm1", width)
    _put_conv(p, "conv2", init_conv3d(rng, width, width))
    _put_norm(p, "norm2", width)
    return p


def decoder_block(x: np.ndarray, skip: np.ndarray, params: Params, factor: Sequence[int]) -> np.ndarray:
    up = upsample_nearest(x, factor)
    if up.shape[1:] != skip.shape[1:]:
        raise ShapeError(f"upsampled extents {up.shape[1:]} do not match skip {skip.shape[1:]}")
    h = np.concatenate([up, skip], axis=0)
    h = relu(_norm(params, "norm1", conv3d(h, _conv(params, "conv1"))))
    return relu(_norm(params, "norm2", conv3d(h, _conv(params, "conv2"))))


# ---------------------------------------------------------------------------
# full model


@dataclass
class NeuroMamba:
    config: ModelConfig
    params: Params

    @classmethod
    def init(cls, config: ModelConfig) -> "NeuroMamba":
        rng = np.random.default_rng(config.seed)
        p: Params = {}
        c_in = config.in_channels
        for s, (w, fs) in enumerate(zip(config.widths, config.downsample)):
            p.update({f"enc{s}.{k}": v for k, v in init_encoder(rng, c_in, w, fs, config.n_state).items()})
            c_in = w
        top = config.widths[-1]
        _put_conv(p, "bottleneck", init_conv3d(rng, top, top))
        _put_norm(p, "bottleneck_norm", top)
        c_in = top
        for s in reversed(range(len(config.widths))):
            w = config.widths[s]
            p.update({f"dec{s}.{k}": v for k, v in init_decoder(rng, c_in, w, w).items()})
            c_in = w
        _put_conv(p, "head", init_conv3d(rng, c_in, 3, kernel=1))
        return cls(config, p)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return model_forward(x, self)

    def save(self, path) -> None:
        save_weights(path, self.params)

    @classmethod
    def load(cls, path, config: ModelConfig) -> "NeuroMamba":
        model = cls.init(config)
        loaded = load_weights(path)
        missing = set(model.params) - set(loaded)
        if missing:
            raise MalformedHeaderError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for k, v in model.params.items():
            if loaded[k].shape != v.shape:
                raise MalformedHeaderError(f"tensor {k}: shape {loaded[k].shape} != {v.shape}")
        return cls(config, {k: loaded[k] for k in model.params})


_OPEN = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)


def model_forward(volume, model: NeuroMamba) -> np.ndarray:
    """Grayscale ``(1, D, H, W)`` (or ``(D, H, W)``) -> affinities ``(3, D, H, W)`` in (0, 1).

    Channel ``c`` is the affinity between a voxel and its neighbor one step
    back along axis ``c`` of ``(z, y, x)``.  Entries on the first slice of an
    axis have no such neighbor; post-processing ignores them.
    """
    x = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    cfg = model.config
    if x.shape[0] != cfg.in_channels:
        raise ShapeError(f"channel axis: model expects {cfg.in_channels}, got {x.shape[0]}")
    cfg.check_extents(x.shape[1:])
    p = model.params
    skips = []
    h = x
    for s, fs in enumerate(cfg.downsample):
        h, skip = encoder_block(h, _sub(p, f"enc{s}."), fs, cfg.prior, cfg.scan_variants)
        skips.append(skip)
    h = relu(_norm(p, "bottleneck_norm", conv3d(h, _conv(p, "bottleneck"))))
    for s in reversed(range(len(cfg.widths))):
        h = decoder_block(h, skips[s], _sub(p, f"dec{s}."), cfg.downsample[s])
    aff = sigmoid(conv3d(h, _conv(p, "head")))
    return np.clip(aff, *_OPEN)


# ---------------------------------------------------------------------------
# checkpoint container: b"NMWT", u32 version, u32 count, then per tensor
# u32 name length, utf-8 name, u32 ndim, u64 extents, f64 data (all little-endian)

MAGIC = b"NMWT"
VERSION = 1


def save_weights(path, tensors: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_weights(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise MalformedHeaderError(f"{path}: unsupported version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(buf):
                raise MalformedHeaderError(f"{path}: tensor {name} truncated")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise MalformedHeaderError(f"{path}: truncated header ({exc})") from None
    return out
