"""Command-line pipeline: gen-pool, score, select, calibrate, eval, stats, ablate.

Exit codes: 0 success, 1 usage error, 2 data/IO error, 3 numeric failure.
Errors go to stderr as ``E:<code>:<message>``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .calibrate import calibrate_blockwise
from .config import SCHEMES, BITS, RunConfig, run_meta
from .errors import DegeneratePoolError, DimensionError, FormatError, NumericError
from .model import (
    build_model,
    forward,
    load_pool,
    load_quantized_model,
    model_quant_loss,
    quantize_model,
    gen_pool,
    save_pool,
    save_quantized_model,
)
from .rotation import apply_rotation, random_rotation
from .sampling import (
    collect_pool_features,
    frame_corr_vector,
    noise_scores,
    read_calibset,
    read_scores,
    select_nfds,
    write_calibset,
    write_scores,
)
from .tensor import excess_kurtosis

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _limit_threads() -> None:
    # must run before numpy spins up its BLAS pool to have any effect
    n = os.environ.get("QUANTSMOOTH_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    for key, attr in (("keep", "keep"), ("clusters", "clusters"), ("budget", "budget"), ("bits", "bits"),
                      ("scheme", "scheme"), ("layer_fraction", "layer_fraction")):
        v = getattr(args, attr, None)
        if v is not None:
            over[key] = v
    return cfg.replace(**over) if over else cfg


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_gen_pool(args) -> int:
    cfg = _config(args)
    seed = cfg.pool_seed if args.seed is None else args.seed
    toy = cfg.toy_config()
    pool = gen_pool(cfg.domains, cfg.pool // cfg.domains, cfg.outlier_frac, seed, toy)
    save_pool(args.out, pool, toy, run_meta(cfg, seed))
    print(f"wrote {len(pool)} scenes to {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config(args)
    pool = load_pool(args.pool)
    toy = cfg.toy_config()
    model = build_model(toy)
    feats = collect_pool_features(model, pool, cfg.layer_fraction)
    scores = noise_scores(feats.records)
    corr = np.stack([frame_corr_vector(a, toy.s, toy.f) for a in feats.final])
    write_scores(args.out, feats.records, scores, corr, run_meta(cfg, cfg.model_seed))
    print(f"scored {len(pool)} scenes -> {args.out}")
    return EXIT_OK


def cmd_select(args) -> int:
    cfg = _config(args)
    seed = 0 if args.seed is None else args.seed
    records, scores, corr = read_scores(args.scores)
    ids = [r.sample_id for r in records]
    sel = select_nfds(ids, scores, corr, cfg.keep, cfg.clusters, cfg.budget, seed, cfg.filter_mode)
    write_calibset(args.out, sel, run_meta(cfg, seed))
    print(f"selected {len(sel.selected)} of {len(ids)} scenes -> {args.out}")
    return EXIT_OK


def _scheme(cfg: RunConfig):
    return ablation._scheme(cfg, cfg.scheme)


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    pool = {sc.scene_id: sc for sc in load_pool(args.pool)}
    ids = read_calibset(args.calib)
    missing = [i for i in ids if i not in pool]
    if missing:
        raise FormatError(f"calibration ids not in pool: {missing[:5]}")
    model = build_model(cfg.toy_config())
    calib = [pool[i] for i in ids]
    scheme = _scheme(cfg)
    meta = run_meta(cfg, cfg.model_seed)
    if args.no_search:
        qmodel, log = quantize_model(model, calib, scheme), []
    else:
        qmodel, logs = calibrate_blockwise(model, calib, scheme, cfg.calib_config())
        log = [{"block": lg.block, "initial_loss": lg.initial_loss, "final_loss": lg.final_loss,
                "passes": lg.passes, "wall_time": lg.wall_time} for lg in logs]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_quantized_model(out, qmodel, meta)
    _write_json(out.parent / "calibration_log.json", {"meta": meta, "blocks": log})
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    toy = cfg.toy_config()
    model = build_model(toy)
    qmodel = load_quantized_model(args.model, model)
    scenes = load_pool(args.pool) if args.pool else ablation.eval_scenes(cfg, toy)
    loss = model_quant_loss(model, qmodel, scenes)
    report = {"meta": run_meta(cfg, cfg.eval_seed), "n_scenes": len(scenes), "model_quant_loss": loss}
    if args.out:
        _write_json(args.out, report)
    print(f"model_quant_loss {loss!r}")
    return EXIT_OK


def cmd_stats(args) -> int:
    """Per-block activation statistics before and after a random rotation."""
    cfg = _config(args)
    toy = cfg.toy_config()
    model = build_model(toy)
    pool = load_pool(args.pool)
    if args.limit:
        pool = pool[:args.limit]
    res = forward(model, pool)
    rot = random_rotation(toy.d, cfg.model_seed)
    rows = []
    for i, x in enumerate(res.block_inputs):
        flat = x.reshape(-1, toy.d)
        xr = apply_rotation(flat, rot)
        rows.append({"block": i, "kurtosis": excess_kurtosis(flat), "max_abs": float(np.abs(flat).max()),
                     "kurtosis_rotated": excess_kurtosis(xr), "max_abs_rotated": float(np.abs(xr).max())})
    _write_json(args.out, {"meta": run_meta(cfg, cfg.model_seed), "n_scenes": len(pool), "blocks": rows})
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = None
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    report = ablation.run_experiment(args.experiment, cfg, seeds)
    ablation.write_report(args.out, report)
    for arm, s in report["summary"].items():
        print(f"{arm:>16s}  mean {s['mean']:.6g}  var {s['var']:.3g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quantsmooth", description="Low-bit quantization toolkit for a toy multi-frame transformer.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-pool", cmd_gen_pool, "generate the synthetic scene pool")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("score", cmd_score, "noise scores and frame-correlation vectors for a pool")
    sp.add_argument("--pool", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--layer-fraction", dest="layer_fraction", type=float)

    sp = add("select", cmd_select, "filter, cluster and sample a calibration set")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--keep", type=float)
    sp.add_argument("--clusters", type=int)
    sp.add_argument("--budget", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("calibrate", cmd_calibrate, "quantize and calibrate the toy model")
    sp.add_argument("--pool", required=True)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bits", choices=sorted(BITS))
    sp.add_argument("--scheme", choices=SCHEMES)
    sp.add_argument("--no-search", dest="no_search", action="store_true", help="skip the block-wise search")

    sp = add("eval", cmd_eval, "model_quant_loss of a quantized model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--pool", help="scenes to evaluate on (default: held-out clean scenes)")
    sp.add_argument("--out")

    sp = add("stats", cmd_stats, "activation distribution statistics per block")
    sp.add_argument("--pool", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--limit", type=int)

    sp = add("ablate", cmd_ablate, "run an ablation experiment across seeds")
    sp.add_argument("--experiment", required=True, choices=ablation.EXPERIMENTS)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", help="comma-separated seed list (overrides the config)")
    sp.add_argument("--bits", choices=sorted(BITS))
    sp.add_argument("--scheme", choices=SCHEMES)
    sp.add_argument("--keep", type=float)
    sp.add_argument("--clusters", type=int)
    sp.add_argument("--budget", type=int)
    return p


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"E:{EXIT_USAGE}:{exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, OverflowError) as exc:
        print(f"E:{EXIT_NUMERIC}:{exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, DimensionError, DegeneratePoolError, ValueError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"E:{EXIT_DATA}:{exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
