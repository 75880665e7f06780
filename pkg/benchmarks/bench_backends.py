"""Time the hot kernels under the numba and numpy backends.

    python benchmarks/bench_backends.py [--repeat 3] [--quick]

Each kernel is warmed up once per backend (so JIT compilation is excluded)
and the best of ``--repeat`` runs is reported.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from neuromamba import _accel
from neuromamba.post import affinity_from_labels, watershed_fragments
from neuromamba.ssm import SsmParams, selective_scan_backward, selective_scan_seq
from neuromamba.synth import gen_synth
from neuromamba.tensor import conv3d, init_conv3d


def cases(quick: bool):
    rng = np.random.default_rng(0)
    d, hw = (8, 32) if quick else (16, 64)
    x = rng.normal(size=(16, d, hw, hw))
    spec = init_conv3d(rng, 16, 16)
    L = 4096 if quick else 32768
    seq = rng.normal(size=(L, 16))
    params = SsmParams.init(16, 8, rng=rng)
    dy = rng.normal(size=seq.shape)
    n = 32 if quick else 64
    _, gt = gen_synth((n, n, n), 12, seed=0)
    aff = np.clip(affinity_from_labels(gt) + rng.normal(0, 0.05, size=(3, n, n, n)), 0, 1)
    return {
        f"conv3d 16->16 on {d}x{hw}x{hw}": lambda: conv3d(x, spec),
        f"scan forward L={L} C=16 N=8": lambda: selective_scan_seq(seq, params),
        f"scan backward L={L} C=16 N=8": lambda: selective_scan_backward(seq, params, dy=dy),
        f"watershed {n}^3": lambda: watershed_fragments(aff, 0.95, 0.05),
    }


def best_of(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--quick", action="store_true", help="smaller inputs")
    args = parser.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':40s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s}")
    prev = _accel.get_backend()
    try:
        for name, fn in cases(args.quick).items():
            timings = {}
            for backend in _accel.BACKENDS:
                _accel.set_backend(backend)
                timings[backend] = best_of(fn, args.repeat)
            print(f"{name:40s} {timings['numba']:10.4f} {timings['numpy']:10.4f} "
                  f"{timings['numpy'] / timings['numba']:7.1f}x")
    finally:
        _accel.set_backend(prev)


if __name__ == "__main__":
    main()
