"""Selective state-space scan: sequential, chunked and reverse-mode kernels.

Per step ``t`` with input row ``x_t`` (``C`` channels)::

    delta_t = softplus(W_delta @ x_t + b_delta)        (C,)
    B_t     = W_B @ x_t,  C_t = W_C @ x_t              (N,)
    h_t     = exp(delta_t[:, None] * A) * h_{t-1} + (delta_t[:, None] * B_t) * x_t[:, None]
    y_t     = h_t @ C_t + D * x_t

``A`` is ``(C, N)`` and strictly negative.  Sequences are ``(L, C)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, Optional, Tuple

import numpy as np

from . import _accel
from ._accel import njit
from .errors import ParameterError, ShapeError
from .tensor import sigmoid, silu, softplus, xavier_uniform


@dataclass
class SsmParams:
    """Parameters of the selective scan.

    ``fixed_delta``, ``fixed_B`` and ``fixed_C`` are test hooks: when set they
    replace the input-dependent projections with constants broadcast over
    time.  ``strict=False`` lifts the negativity check on ``A``.
    """

    A: np.ndarray  # (C, N)
    W_B: np.ndarray  # (N, C)
    W_C: np.ndarray  # (N, C)
    W_delta: np.ndarray  # (C, C)
    b_delta: np.ndarray  # (C,)
    D: np.ndarray  # (C,)
    fixed_delta: Optional[np.ndarray] = None
    fixed_B: Optional[np.ndarray] = None
    fixed_C: Optional[np.ndarray] = None
    strict: bool = True

    def __post_init__(self):
        for f in ("A", "W_B", "W_C", "W_delta", "b_delta", "D"):
            setattr(self, f, np.ascontiguousarray(getattr(self, f), dtype=np.float64))
        c, n = self.A.shape
        expect = {"W_B": (n, c), "W_C": (n, c), "W_delta": (c, c), "b_delta": (c,), "D": (c,)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.strict and not np.all(self.A < 0):
            raise ParameterError("state matrix A must be strictly negative")
        if self.fixed_delta is not None:
            self.fixed_delta = np.broadcast_to(np.asarray(self.fixed_delta, float), (c,)).copy()
            if self.strict and not np.all(self.fixed_delta > 0):
                raise ParameterError("fixed_delta must be positive")
        if self.fixed_B is not None:
            self.fixed_B = np.broadcast_to(np.asarray(self.fixed_B, float), (n,)).copy()
        if self.fixed_C is not None:
            self.fixed_C = np.broadcast_to(np.asarray(self.fixed_C, float), (n,)).copy()

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def n_state(self) -> int:
        return self.A.shape[1]

    @classmethod
    def init(cls, channels: int, n_state: int = 8, seed: int = 0,
             rng: Optional[np.random.Generator] = None) -> "SsmParams":
        rng = np.random.default_rng(seed) if rng is None else rng
        A = -np.tile(np.arange(1, n_state + 1, dtype=np.float64), (channels, 1))
        return cls(
            A=A,
            W_B=xavier_uniform(rng, (n_state, channels)),
            W_C=xavier_uniform(rng, (n_state, channels)),
            W_delta=xavier_uniform(rng, (channels, channels)),
            b_delta=np.zeros(channels),
            D=np.ones(channels),
        )

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {prefix + k: getattr(self, k) for k in TRAINABLE}

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray], prefix: str = "") -> "SsmParams":
        return cls(**{k: state[prefix + k] for k in TRAINABLE})


TRAINABLE = ("A", "W_B", "W_C", "W_delta", "b_delta", "D")


def _projections(x: np.ndarray, p: SsmParams):
    u = x @ p.W_delta.T + p.b_delta
    L = x.shape[0]
    delta = softplus(u) if p.fixed_delta is None else np.tile(p.fixed_delta, (L, 1))
    Bs = x @ p.W_B.T if p.fixed_B is None else np.tile(p.fixed_B, (L, 1))
    Cs = x @ p.W_C.T if p.fixed_C is None else np.tile(p.fixed_C, (L, 1))
    return u, np.ascontiguousarray(delta), np.ascontiguousarray(Bs), np.ascontiguousarray(Cs)


def _check_inputs(x, p: SsmParams, h0):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.channels:
        raise ShapeError(f"scan input must be (L, {p.channels}), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("scan input must have L >= 1")
    if not np.all(np.isfinite(x)):
        raise ParameterError("scan input contains non-finite values")
    if h0 is None:
        h0 = np.zeros((p.channels, p.n_state))
    h0 = np.ascontiguousarray(h0, dtype=np.float64)
    if h0.shape != (p.channels, p.n_state):
        raise ShapeError(f"h0 must be {(p.channels, p.n_state)}, got {h0.shape}")
    return x, h0


# ---------------------------------------------------------------------------
# forward recurrence kernels


@njit
def _scan_fwd_nb(delta, A, Bs, Cs, x, D, h0, y, hs):
    L, C = x.shape
    N = A.shape[1]
    h = h0.copy()
    store = hs.shape[0] == L
    for t in range(L):
        for c in range(C):
            dt = delta[t, c]
            xt = x[t, c]
            acc = 0.0
            for n in range(N):
                v = np.exp(dt * A[c, n]) * h[c, n] + dt * Bs[t, n] * xt
                h[c, n] = v
                acc += v * Cs[t, n]
            y[t, c] = acc + D[c] * xt
        if store:
            hs[t] = h
    return h


def _scan_fwd_np(delta, A, Bs, Cs, x, D, h0, y, hs):
    L = x.shape[0]
    store = hs.shape[0] == L
    h = h0.copy()
    for t in range(L):
        dt = delta[t][:, None]
        h = np.exp(dt * A) * h + dt * Bs[t][None, :] * x[t][:, None]
        y[t] = h @ Cs[t] + D * x[t]
        if store:
            hs[t] = h
    return h


def _scan_fwd(delta, A, Bs, Cs, x, D, h0, store=False):
    L, C = x.shape
    y = np.empty((L, C))
    hs = np.empty((L if store else 0, C, A.shape[1]))
    kernel = _scan_fwd_nb if _accel.use_jit() else _scan_fwd_np
    hL = kernel(delta, A, Bs, Cs, x, D, h0, y, hs)
    return y, hL, hs


def selective_scan_seq(x: np.ndarray, p: SsmParams, h0: Optional[np.ndarray] = None
                       ) -> Tuple[np.ndarray, np.ndarray]:
    """Reference left-to-right scan.  Returns ``(y, h_L)``."""
    x, h0 = _check_inputs(x, p, h0)
    _, delta, Bs, Cs = _projections(x, p)
    y, hL, _ = _scan_fwd(delta, p.A, Bs, Cs, x, p.D, h0)
    return y, hL


# ---------------------------------------------------------------------------
# chunked scan


@njit
def _chunk_summary_nb(delta, A, Bs, x, start, stop, a_out, b_out):
    # composes h -> a * h + b over steps [start, stop)
    C, N = A.shape
    for c in range(C):
        for n in range(N):
            a = 1.0
            b = 0.0
            for t in range(start, stop):
                dec = np.exp(delta[t, c] * A[c, n])
                a = dec * a
                b = dec * b + delta[t, c] * Bs[t, n] * x[t, c]
            a_out[c, n] = a
            b_out[c, n] = b


def _chunk_summary_np(delta, A, Bs, x, start, stop, a_out, b_out):
    a = np.ones_like(A)
    b = np.zeros_like(A)
    for t in range(start, stop):
        dt = delta[t][:, None]
        dec = np.exp(dt * A)
        a = dec * a
        b = dec * b + dt * Bs[t][None, :] * x[t][:, None]
    a_out[...] = a
    b_out[...] = b


def affine_combine(first, second):
    """Compose affine maps ``h -> a*h + b``: apply ``first`` then ``second``."""
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


def exclusive_affine_scan(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Work-efficient (up-sweep / down-sweep) exclusive scan of affine maps.

    ``a[k], b[k]`` describe chunk ``k``; the result at ``k`` is the
    composition of chunks ``0..k-1`` (identity at ``k = 0``).  The tree shape
    depends only on the number of chunks, so results are reproducible.
    """
    n = a.shape[0]
    size = 1
    while size < n:
        size *= 2
    ta = np.ones((size,) + a.shape[1:])
    tb = np.zeros((size,) + b.shape[1:])
    ta[:n], tb[:n] = a, b
    step = 1
    while step < size:  # up-sweep
        right = np.arange(2 * step - 1, size, 2 * step)
        left = right - step
        ta[right], tb[right] = affine_combine((ta[left], tb[left]), (ta[right], tb[right]))
        step *= 2
    ta[size - 1], tb[size - 1] = 1.0, 0.0
    step = size // 2
    while step >= 1:  # down-sweep
        right = np.arange(2 * step - 1, size, 2 * step)
        left = right - step
        la, lb = ta[left].copy(), tb[left].copy()
        ta[left], tb[left] = ta[right], tb[right]
        ta[right], tb[right] = affine_combine((ta[right], tb[right]), (la, lb))
        step //= 2
    return ta[:n], tb[:n]


def selective_scan_chunked(x: np.ndarray, p: SsmParams, h0: Optional[np.ndarray] = None,
                           chunk: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Two-pass chunked scan with the same contract as :func:`selective_scan_seq`.

    Pass one reduces every chunk to an affine map of its entry state; an
    exclusive scan over those maps yields each chunk's entry state; pass two
    re-runs each chunk from its entry state to materialize ``y``.
    """
    if chunk < 1:
        raise ParameterError(f"chunk must be >= 1, got {chunk}")
    x, h0 = _check_inputs(x, p, h0)
    _, delta, Bs, Cs = _projections(x, p)
    L = x.shape[0]
    bounds = list(range(0, L, chunk)) + [L]
    n_chunks = len(bounds) - 1
    a = np.empty((n_chunks,) + p.A.shape)
    b = np.empty_like(a)
    summary = _chunk_summary_nb if _accel.use_jit() else _chunk_summary_np
    for k in range(n_chunks):
        summary(delta, p.A, Bs, x, bounds[k], bounds[k + 1], a[k], b[k])
    pa, pb = exclusive_affine_scan(a, b)
    starts = pa * h0 + pb
    y = np.empty((L, p.channels))
    hL = h0
    for k in range(n_chunks):
        s, e = bounds[k], bounds[k + 1]
        y[s:e], hL, _ = _scan_fwd(delta[s:e], p.A, Bs[s:e], Cs[s:e], x[s:e], p.D, starts[k])
    return y, hL


# ---------------------------------------------------------------------------
# reverse mode


@dataclass
class SsmGrads:
    x: np.ndarray
    h0: np.ndarray
    A: np.ndarray
    W_B: np.ndarray
    W_C: np.ndarray
    W_delta: np.ndarray
    b_delta: np.ndarray
    D: np.ndarray

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@njit
def _scan_bwd_nb(delta, A, Bs, Cs, x, D, h0, hs, dy, dhL, d_delta, dB, dC, dx, dA):
    L, C = x.shape
    N = A.shape[1]
    dh = dhL.copy()
    for t in range(L - 1, -1, -1):
        for c in range(C):
            g = dy[t, c]
            dt = delta[t, c]
            xt = x[t, c]
            dx[t, c] += g * D[c]
            dd = 0.0
            dxx = 0.0
            for n in range(N):
                h_t = hs[t, c, n]
                h_prev = hs[t - 1, c, n] if t > 0 else h0[c, n]
                dC[t, n] += g * h_t
                gh = dh[c, n] + g * Cs[t, n]
                dec = np.exp(dt * A[c, n])
                ddec = gh * h_prev * dec
                dd += ddec * A[c, n] + gh * Bs[t, n] * xt
                dA[c, n] += ddec * dt
                dB[t, n] += gh * dt * xt
                dxx += gh * dt * Bs[t, n]
                dh[c, n] = gh * dec
            d_delta[t, c] = dd
            dx[t, c] += dxx
    return dh


def _scan_bwd_np(delta, A, Bs, Cs, x, D, h0, hs, dy, dhL, d_delta, dB, dC, dx, dA):
    L = x.shape[0]
    dh = dhL.copy()
    dx += dy * D
    for t in range(L - 1, -1, -1):
        g = dy[t][:, None]
        dt = delta[t][:, None]
        h_prev = hs[t - 1] if t > 0 else h0
        dC[t] += (g * hs[t]).sum(axis=0)
        gh = dh + g * Cs[t][None, :]
        dec = np.exp(dt * A)
        ddec = gh * h_prev * dec
        d_delta[t] = (ddec * A + gh * Bs[t][None, :] * x[t][:, None]).sum(axis=1)
        dA += ddec * dt
        dB[t] += (gh * dt * x[t][:, None]).sum(axis=0)
        dx[t] += (gh * dt * Bs[t][None, :]).sum(axis=1)
        dh = gh * dec
    return dh


def selective_scan_backward(x: np.ndarray, p: SsmParams, h0: Optional[np.ndarray] = None,
                            dy: Optional[np.ndarray] = None,
                            dhL: Optional[np.ndarray] = None) -> SsmGrads:
    """Exact gradients of ``sum(dy * y) + sum(dhL * h_L)`` w.r.t. inputs and parameters."""
    x, h0 = _check_inputs(x, p, h0)
    L, C = x.shape
    N = p.n_state
    dy = np.zeros((L, C)) if dy is None else np.ascontiguousarray(dy, dtype=np.float64)
    if dy.shape != (L, C):
        raise ShapeError(f"dy must be {(L, C)}, got {dy.shape}")
    dhL = np.zeros((C, N)) if dhL is None else np.ascontiguousarray(dhL, dtype=np.float64)
    if dhL.shape != (C, N):
        raise ShapeError(f"dhL must be {(C, N)}, got {dhL.shape}")

    u, delta, Bs, Cs = _projections(x, p)
    _, _, hs = _scan_fwd(delta, p.A, Bs, Cs, x, p.D, h0, store=True)

    d_delta = np.zeros((L, C))
    dB = np.zeros((L, N))
    dC = np.zeros((L, N))
    dx = np.zeros((L, C))
    dA = np.zeros((C, N))
    kernel = _scan_bwd_nb if _accel.use_jit() else _scan_bwd_np
    dh0 = kernel(delta, p.A, Bs, Cs, x, p.D, h0, hs, dy, dhL, d_delta, dB, dC, dx, dA)

    dW_delta = np.zeros_like(p.W_delta)
    db_delta = np.zeros_like(p.b_delta)
    dW_B = np.zeros_like(p.W_B)
    dW_C = np.zeros_like(p.W_C)
    if p.fixed_delta is None:
        du = d_delta * sigmoid(u)
        dW_delta = du.T @ x
        db_delta = du.sum(axis=0)
        dx += du @ p.W_delta
    if p.fixed_B is None:
        dW_B = dB.T @ x
        dx += dB @ p.W_B
    if p.fixed_C is None:
        dW_C = dC.T @ x
        dx += dC @ p.W_C
    dD = (dy * x).sum(axis=0)
    return SsmGrads(x=dx, h0=dh0, A=dA, W_B=dW_B, W_C=dW_C, W_delta=dW_delta,
                    b_delta=db_delta, D=dD)


# ---------------------------------------------------------------------------
# gated wrapper


@dataclass
class MambaParams:
    """Gated mixer around the scan: ``out = W_out @ (scan(silu(W_in x)) * silu(W_gate x))``."""

    W_in: np.ndarray  # (E, C)
    W_gate: np.ndarray  # (E, C)
    W_out: np.ndarray  # (C, E)
    ssm: SsmParams = field(repr=False)

    @classmethod
    def init(cls, channels: int, n_state: int = 8, expand: int = 1, seed: int = 0,
             rng: Optional[np.random.Generator] = None) -> "MambaParams":
        rng = np.random.default_rng(seed) if rng is None else rng
        e = channels * expand
        return cls(
            W_in=xavier_uniform(rng, (e, channels)),
            W_gate=xavier_uniform(rng, (e, channels)),
            W_out=xavier_uniform(rng, (channels, e)),
            ssm=SsmParams.init(e, n_state, rng=rng),
        )

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {prefix + "W_in": self.W_in, prefix + "W_gate": self.W_gate,
               prefix + "W_out": self.W_out}
        out.update(self.ssm.state_dict(prefix + "ssm."))
        return out

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray], prefix: str = "") -> "MambaParams":
        return cls(state[prefix + "W_in"], state[prefix + "W_gate"], state[prefix + "W_out"],
                   SsmParams.from_state(state, prefix + "ssm."))


def mamba_block(x: np.ndarray, p: MambaParams, chunk: Optional[int] = None) -> np.ndarray:
    """Apply the gated mixer to an ``(L, C)`` sequence."""
    x = np.asarray(x, dtype=np.float64)
    u = silu(x @ p.W_in.T)
    gate = silu(x @ p.W_gate.T)
    if chunk is None:
        y, _ = selective_scan_seq(u, p.ssm)
    else:
        y, _ = selective_scan_chunked(u, p.ssm, chunk=chunk)
    return (y * gate) @ p.W_out.T
