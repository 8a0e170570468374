"""Seeded ablation harness: scheme, granularity, transform-order and sampling arms.

Every experiment returns a plain dict report (JSON-ready). Reports hold the
per-seed losses, per-arm mean and variance, and the ordering verdicts the
acceptance suite checks. Nothing time-dependent goes into a report, so a rerun
with the same config is byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .calibrate import calibrate_blockwise
from .config import RunConfig, run_meta
from .model import build_model, forward, gen_pool, gen_scene, model_quant_loss, quantize_model
from .qlinear import QuantScheme
from .quantizer import Granularity, Mode
from .sampling import (
    collect_pool_features,
    frame_corr_vector,
    noise_scores,
    select_nfds,
    select_random,
)
from .tensor import make_rng

EXPERIMENTS = ("schemes", "granularity", "order", "sampling")
SCHEME_ARMS = ("naive", "rotation", "scale", "dsfq")
SAMPLING_ARMS = ("random", "filtered", "clustered", "nfds")
GRANULARITY_ARMS = {
    "dynamic-token": (Granularity.PER_ROW, Mode.DYNAMIC),
    "dynamic-tensor": (Granularity.PER_TENSOR, Mode.DYNAMIC),
    "static-token": (Granularity.PER_ROW, Mode.STATIC),
    "static-tensor": (Granularity.PER_TENSOR, Mode.STATIC),
}
ORDER_ARMS = ("rot-scale", "scale-rot")

_CALIB_KEY = 0xCA1B
_EVAL_KEY = 0xE7A1


def clean_scenes(cfg: RunConfig, toy, n: int, key: int, seed: int) -> list:
    """``n`` outlier-free scenes cycling through the domains, independent of the pool."""
    return [gen_scene(i % cfg.domains, make_rng(key, seed, i), toy, scene_id=-(i + 1)) for i in range(n)]


def eval_scenes(cfg: RunConfig, toy, seed: Optional[int] = None) -> list:
    return clean_scenes(cfg, toy, cfg.eval_size, _EVAL_KEY, cfg.eval_seed if seed is None else seed)


def _scheme(cfg: RunConfig, variant: str, **kw) -> QuantScheme:
    w_bits, a_bits = cfg.bit_pair
    return QuantScheme.make(variant, w_bits, act_bits=a_bits, alpha=cfg.alpha, **kw)


def _summarize(rows: Sequence[dict], arms: Sequence[str], key: str = "loss") -> dict:
    out = {}
    for arm in arms:
        v = np.array([r[key] for r in rows if r["arm"] == arm])
        # population variance over seeds
        out[arm] = {"mean": float(v.mean()), "var": float(v.var()), "n": int(v.size)}
    return out


def _per_seed(rows: Sequence[dict]) -> dict:
    table: dict = {}
    for r in rows:
        table.setdefault(r["seed"], {})[r["arm"]] = r["loss"]
    return table


def run_schemes(cfg: RunConfig, seeds: Optional[Sequence[int]] = None, progress: Optional[Callable] = None) -> dict:
    """Naive / rotation-only / scale-only / DSFQ; one toy model per seed."""
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    rows, wins = [], []
    for seed in seeds:
        toy = replace(cfg.toy_config(), seed=seed)
        model = build_model(toy)
        calib = clean_scenes(cfg, toy, cfg.budget, _CALIB_KEY, seed)
        ev = eval_scenes(cfg, toy, seed + cfg.eval_seed)
        fp = forward(model, ev).final
        loss = {arm: model_quant_loss(model, quantize_model(model, calib, _scheme(cfg, arm)), ev, fp)
                for arm in SCHEME_ARMS}
        rows += [{"seed": seed, "arm": arm, "loss": loss[arm]} for arm in SCHEME_ARMS]
        ok = loss["dsfq"] < loss["rotation"] < loss["naive"] and loss["dsfq"] < loss["scale"]
        wins.append(bool(ok))
        if progress:
            progress(seed, loss)
    return {
        "experiment": "schemes",
        "arms": list(SCHEME_ARMS),
        "rows": rows,
        "summary": _summarize(rows, SCHEME_ARMS),
        "verdicts": {
            "ordering_per_seed": wins,
            "ordering_fraction": float(np.mean(wins)),
            "ordering_ok": bool(np.mean(wins) >= 0.9),
        },
    }


def run_order(cfg: RunConfig, seeds: Optional[Sequence[int]] = None, progress: Optional[Callable] = None) -> dict:
    """Rotate-then-scale against scale-then-rotate, DSFQ, one toy model per seed."""
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    rows = []
    for seed in seeds:
        toy = replace(cfg.toy_config(), seed=seed)
        model = build_model(toy)
        calib = clean_scenes(cfg, toy, cfg.budget, _CALIB_KEY, seed)
        ev = eval_scenes(cfg, toy, seed + cfg.eval_seed)
        fp = forward(model, ev).final
        for arm in ORDER_ARMS:
            q = quantize_model(model, calib, _scheme(cfg, "dsfq", order=arm))
            rows.append({"seed": seed, "arm": arm, "loss": model_quant_loss(model, q, ev, fp)})
        if progress:
            progress(seed, _per_seed(rows)[seed])
    table = _per_seed(rows)
    better = [table[s]["rot-scale"] <= table[s]["scale-rot"] for s in seeds]
    return {
        "experiment": "order",
        "arms": list(ORDER_ARMS),
        "rows": rows,
        "summary": _summarize(rows, ORDER_ARMS),
        "verdicts": {"rot_scale_better_per_seed": better, "rot_scale_better_fraction": float(np.mean(better))},
    }


class PoolContext:
    """The default toy model, its pool, noise scores and frame vectors, computed once."""

    def __init__(self, cfg: RunConfig, pool: Optional[Sequence] = None):
        self.cfg = cfg
        self.toy = cfg.toy_config()
        self.model = build_model(self.toy)
        if pool is None:
            pool = gen_pool(cfg.domains, cfg.pool // cfg.domains, cfg.outlier_frac, cfg.pool_seed, self.toy)
        self.pool = list(pool)
        self.by_id = {sc.scene_id: sc for sc in self.pool}
        self.ids = [sc.scene_id for sc in self.pool]
        feats = collect_pool_features(self.model, self.pool, cfg.layer_fraction)
        self.records = feats.records
        self.scores = noise_scores(feats.records)
        self.corr = np.stack([frame_corr_vector(a, self.toy.s, self.toy.f) for a in feats.final])
        self.eval = eval_scenes(cfg, self.toy)
        self.fp_eval = forward(self.model, self.eval).final

    def select(self, arm: str, seed: int) -> list:
        c = self.cfg
        if arm == "random":
            return select_random(self.ids, c.budget, seed)
        flags = {"filtered": (True, False), "clustered": (False, True), "nfds": (True, True)}[arm]
        sel = select_nfds(self.ids, self.scores, self.corr, c.keep, c.clusters, c.budget, seed,
                          c.filter_mode, use_filter=flags[0], use_cluster=flags[1])
        return sel.selected

    def scenes(self, ids: Sequence[int]) -> list:
        return [self.by_id[i] for i in ids]

    def loss(self, qmodel) -> float:
        return model_quant_loss(self.model, qmodel, self.eval, self.fp_eval)


def run_granularity(cfg: RunConfig, ctx: Optional[PoolContext] = None, seeds: Optional[Sequence[int]] = None,
                    progress: Optional[Callable] = None) -> dict:
    """Activation granularity/mode arms on the default model; calibration sets drawn at random from the pool."""
    ctx = ctx or PoolContext(cfg)
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    rows = []
    for seed in seeds:
        calib = ctx.scenes(select_random(ctx.ids, cfg.budget, seed))
        for arm, (gran, mode) in GRANULARITY_ARMS.items():
            q = quantize_model(ctx.model, calib, _scheme(cfg, cfg.scheme, act_granularity=gran, act_mode=mode))
            rows.append({"seed": seed, "arm": arm, "loss": ctx.loss(q)})
        if progress:
            progress(seed, _per_seed(rows)[seed])
    table = _per_seed(rows)
    ok = [table[s]["dynamic-token"] <= table[s]["static-tensor"] for s in seeds]
    return {
        "experiment": "granularity",
        "arms": list(GRANULARITY_ARMS),
        "rows": rows,
        "summary": _summarize(rows, GRANULARITY_ARMS),
        "verdicts": {"dynamic_token_le_static_tensor": ok, "all_seeds": bool(all(ok))},
    }


def run_sampling(cfg: RunConfig, ctx: Optional[PoolContext] = None, seeds: Optional[Sequence[int]] = None,
                 arms: Sequence[str] = SAMPLING_ARMS, progress: Optional[Callable] = None) -> dict:
    """Calibration-set selection strategies; each set is calibrated block-wise, then evaluated."""
    ctx = ctx or PoolContext(cfg)
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    scheme = _scheme(cfg, cfg.scheme)
    ccfg = cfg.calib_config()
    rows = []
    monotone = True
    for seed in seeds:
        for arm in arms:
            ids = ctx.select(arm, seed)
            calib = ctx.scenes(ids)
            before = ctx.loss(quantize_model(ctx.model, calib, scheme))
            qmodel, logs = calibrate_blockwise(ctx.model, calib, scheme, ccfg)
            after = ctx.loss(qmodel)
            blocks_ok = all(lg.final_loss <= lg.initial_loss for lg in logs)
            monotone &= blocks_ok and after <= before
            rows.append({
                "seed": seed, "arm": arm, "loss": after, "loss_uncalibrated": before,
                "n_outliers": int(sum(ctx.by_id[i].is_outlier for i in ids)),
                "block_losses": [[lg.initial_loss, lg.final_loss] for lg in logs],
            })
            if progress:
                progress(seed, arm, before, after)
    summary = _summarize(rows, arms)
    verdicts = {"calibration_monotone": bool(monotone)}
    if "nfds" in arms and "random" in arms:
        verdicts["nfds_mean_le_random"] = summary["nfds"]["mean"] <= summary["random"]["mean"]
        verdicts["nfds_var_le_random"] = summary["nfds"]["var"] <= summary["random"]["var"]
    return {
        "experiment": "sampling",
        "arms": list(arms),
        "rows": rows,
        "summary": summary,
        "summary_uncalibrated": _summarize(rows, arms, "loss_uncalibrated"),
        "verdicts": verdicts,
    }


def run_experiment(name: str, cfg: RunConfig, seeds: Optional[Sequence[int]] = None, progress=None) -> dict:
    if name not in EXPERIMENTS:
        raise ValueError(f"experiment must be one of {EXPERIMENTS}")
    fn = {"schemes": run_schemes, "order": run_order, "granularity": run_granularity, "sampling": run_sampling}[name]
    report = fn(cfg, seeds=seeds, progress=progress)
    report["meta"] = run_meta(cfg, list(cfg.seeds if seeds is None else seeds))
    return report


def report_csv(report: dict) -> str:
    """Flat CSV with the same numbers as the JSON report (floats written with ``repr``)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "seed", "arm", "loss"])
    for r in report["rows"]:
        w.writerow(["row", r["seed"], r["arm"], repr(r["loss"])])
    for arm, s in report["summary"].items():
        w.writerow(["mean", "", arm, repr(s["mean"])])
        w.writerow(["var", "", arm, repr(s["var"])])
    return buf.getvalue()


def write_report(path, report: dict) -> None:
    """``<path>`` gets the JSON; a sibling ``.csv`` gets the flat table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    path.with_suffix(".csv").write_text(report_csv(report))
