"""Command-line entry point: ``neuromamba <command> ...``.

Failures print one JSON object ``{"error": kind, "code": n, "message": ...}``
to stderr and exit with ``n``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics, post
from .config import PipelineConfig, threads_from_env
from .errors import ConfigError, MissingFileError, NeuroMambaError, ParameterError
from .net import NeuroMamba, model_forward
from .scan_orders import Variant, build_order, expand_scan_list, locality_metrics
from .synth import gen_synth
from .tiling import predict_tiled, tile_plan
from .volume_io import read_volume, write_volume

log = logging.getLogger("neuromamba")


def _triple(text: str) -> tuple:
    try:
        parts = tuple(int(p) for p in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected d,h,w integers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three extents, got {text!r}")
    return parts


def _pair(text: str) -> tuple:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two numbers, got {text!r}") from None
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected R_a,R_t, got {text!r}")
    return parts


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    threads = args.threads if args.threads is not None else threads_from_env(cfg.threads)
    return cfg.override(
        seed=getattr(args, "seed", None),
        block=getattr(args, "block", None),
        theta=getattr(args, "theta", None),
        t_hi=getattr(args, "t_hi", None),
        t_lo=getattr(args, "t_lo", None),
        scan_variants=getattr(args, "scan_variants", None),
        threads=threads,
    )


def _labels(path) -> np.ndarray:
    arr, header = read_volume(path)
    if header.channels != 1:
        raise ParameterError(f"{path}: label volume must have one channel, got {header.channels}")
    return arr[0]


def _emit_json(record: dict, out: Optional[str]):
    text = json.dumps(record, sort_keys=True)
    print(text)
    if out:
        Path(out).write_text(text + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    image, gt = gen_synth(args.dims, args.n_seeds, args.sigma, seed)
    prefix = Path(args.out)
    img_path = write_volume(f"{prefix}-image.json", image, args.resolution)
    gt_path = write_volume(f"{prefix}-gt.json", gt, args.resolution)
    _emit_json({"image": str(img_path), "gt": str(gt_path), "labels": int(gt.max())}, None)
    return 0


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    image, header = read_volume(args.image)
    if header.channels != 1:
        raise ParameterError(f"{args.image}: expected a single-channel image")
    if header.resolution is not None and args.config is None:
        cfg = cfg.override(R_a=header.resolution[0], R_t=header.resolution[1])
    model_cfg = cfg.model_config()
    model = NeuroMamba.load(args.weights, model_cfg) if args.weights else NeuroMamba.init(model_cfg)
    plan = tile_plan(header.dims, cfg.block)
    model_cfg.check_extents(plan.block)
    aff = predict_tiled(image, lambda tile: model_forward(tile, model), plan, threads=cfg.threads)
    write_volume(args.out, aff, header.resolution)
    if args.save_weights:
        model.save(args.save_weights)
    return 0


def cmd_segment(args) -> int:
    cfg = _load_config(args)
    aff, header = read_volume(args.affinities)
    if header.channels != 3:
        raise ParameterError(f"{args.affinities}: expected 3 affinity channels, got {header.channels}")
    frags = post.watershed_fragments(aff, cfg.t_hi, cfg.t_lo)
    if args.method == "multicut":
        seg = post.multicut_gaec(frags, aff, cfg.theta)
    else:
        seg = post.agglomerate_waterz(frags, aff, cfg.theta, args.merge_stat or cfg.merge_stat)
    write_volume(args.out, seg, header.resolution)
    return 0


def cmd_eval(args) -> int:
    gt = _labels(args.gt)
    pred = _labels(args.pred)
    _emit_json(metrics.evaluate(gt, pred, ignore_background=not args.include_background), args.out)
    return 0


def cmd_scan_bench(args) -> int:
    variants = (expand_scan_list(args.scan_variants) if args.scan_variants
                else tuple(v.value for v in Variant))
    dims_list = args.dims or [(4, 4, 4)]
    handle = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(handle)
        writer.writerow(["variant", "dims", "mean_jump", "p95_jump", "adjacent_fraction"])
        for dims in dims_list:
            for v in variants:
                m = locality_metrics(build_order(v, dims))
                writer.writerow([v, "x".join(map(str, dims)), repr(m["mean_jump"]),
                                 repr(m["p95_jump"]), repr(m["adjacent_fraction"])])
    finally:
        if args.out:
            handle.close()
    return 0


def cmd_oracle_seg(args) -> int:
    cfg = _load_config(args)
    gt = _labels(args.gt)
    aff = post.affinity_from_labels(gt)
    frags = post.watershed_fragments(aff, cfg.t_hi, cfg.t_lo)
    seg = post.agglomerate_waterz(frags, aff, cfg.theta, cfg.merge_stat)
    _, header = read_volume(args.gt)
    write_volume(args.out, seg, header.resolution)
    _emit_json(metrics.evaluate(gt, seg), None)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neuromamba",
        description="Affinity prediction, segmentation and evaluation for EM volumes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=True, seed=True):
        if config:
            p.add_argument("--config", help="pipeline config JSON")
        if seed:
            p.add_argument("--seed", type=_u64)
        p.add_argument("--threads", type=int, help="worker threads (fallback: $NEUROMAMBA_THREADS)")

    def thresholds(p):
        p.add_argument("--theta", type=float)
        p.add_argument("--t-hi", dest="t_hi", type=float)
        p.add_argument("--t-lo", dest="t_lo", type=float)

    p = sub.add_parser("gen-synth", help="Voronoi phantom image + ground truth")
    common(p, config=False)
    p.add_argument("--dims", type=_triple, default=(32, 32, 32))
    p.add_argument("--n-seeds", type=int, default=8)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--resolution", type=_pair, default=(40.0, 4.0), help="R_a,R_t in nm")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("predict", help="tiled affinity prediction")
    common(p)
    p.add_argument("image")
    p.add_argument("--block", type=_triple)
    p.add_argument("--scan-variants", dest="scan_variants")
    p.add_argument("--weights", help="NMWT checkpoint to load")
    p.add_argument("--save-weights", dest="save_weights", help="write the model's NMWT checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("segment", help="affinities -> segmentation")
    common(p, seed=False)
    thresholds(p)
    p.add_argument("affinities")
    p.add_argument("--method", choices=("waterz", "multicut"), default="waterz")
    p.add_argument("--merge-stat", dest="merge_stat", choices=post.MERGE_STATS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="VI and adapted Rand error")
    common(p, config=False, seed=False)
    p.add_argument("gt")
    p.add_argument("pred")
    p.add_argument("--include-background", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scan-bench", help="locality of serialization orders (CSV)")
    common(p, config=False, seed=False)
    p.add_argument("--dims", type=_triple, action="append")
    p.add_argument("--scan-variants", dest="scan_variants")
    p.add_argument("--out")
    p.set_defaults(func=cmd_scan_bench)

    p = sub.add_parser("oracle-seg", help="ground truth -> affinities -> watershed -> agglomeration")
    common(p, seed=False)
    thresholds(p)
    p.add_argument("gt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle_seg)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.func(args)
    except NeuroMambaError as exc:
        print(json.dumps({"error": exc.kind, "code": exc.code, "message": str(exc)}), file=sys.stderr)
        return exc.code
    except OSError as exc:
        err = MissingFileError(str(exc))
        print(json.dumps({"error": err.kind, "code": err.code, "message": str(exc)}), file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
