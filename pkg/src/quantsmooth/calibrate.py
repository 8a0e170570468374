"""Block-wise calibration of smoothing scales and weight step sizes.

Blocks are calibrated front to back. Block ``k`` sees the outputs of the
already-calibrated quantized blocks ``< k`` as its input, and its target is the
full-precision block applied to that same input.

The search is derivative free. Smoothing scales are tuned in contiguous
chunks of channels that share one multiplier; for each chunk every grid multiplier is
tried and the best block loss wins. Weight steps are tuned per output channel:
each channel's multiplier is picked from the grid by that channel's own
layer-output error (channels are independent there), and the whole proposal is
accepted only if it lowers the block loss. Every grid contains 1.0, so the
loss never goes up.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError
from .model import (
    LINEARS,
    QuantizedModel,
    ToyModel,
    _attention,
    fp_linear,
    gelu,
    layer_norm,
    quantize_block,
    registered_batch,
)
from .qlinear import QuantLinear, QuantScheme, forward_quantized
from .rotation import apply_rotation


@dataclass(frozen=True)
class CalibConfig:
    grid: tuple = (0.5, 0.8, 1.0, 1.25, 2.0)
    refine_grid: tuple = (0.9, 0.95, 1.0, 1.05, 1.1)
    passes: int = 3
    refine_passes: int = 1
    chunk: int = 8
    # caps the chunks per linear (chunks widen to fit); None keeps ``chunk`` wide chunks
    max_chunks: Optional[int] = None
    tune_scales: bool = True
    tune_deltas: bool = True
    # learning rates of gradient-based training (scale, step); the grid search does not use them
    lr_scale: float = 5e-3
    lr_delta: float = 5e-2

    def __post_init__(self):
        if 1.0 not in self.grid or 1.0 not in self.refine_grid:
            raise ValueError("both grids must contain the no-op multiplier 1.0")
        if self.passes < 0 or self.refine_passes < 0 or self.chunk < 1:
            raise ValueError("pass counts must be non-negative and chunk positive")
        if self.max_chunks is not None and self.max_chunks < 1:
            raise ValueError("max_chunks must be positive")

    @classmethod
    def fast(cls) -> "CalibConfig":
        """Cheaper search: 2 chunks per linear, one coarse pass, one refinement pass."""
        return cls(passes=1, max_chunks=2)

    def chunk_width(self, d: int) -> int:
        if self.max_chunks is None:
            return self.chunk
        return max(self.chunk, -(-d // self.max_chunks))


def block_recon_loss(block_fp: Callable, block_q: Callable, x) -> float:
    """MSE between the full-precision and quantized block outputs on ``x``."""
    ref = block_fp(x)
    out = block_q(x)
    if ref.shape != out.shape:
        raise ValueError(f"block outputs differ in shape: {ref.shape} vs {out.shape}")
    return float(np.mean((ref - out) ** 2))


def fp_block(model: ToyModel, i: int) -> Callable:
    from .model import block_forward
    return lambda x: block_forward(model, i, x, fp_linear(model))


def quant_block(model: ToyModel, i: int, layers: dict) -> Callable:
    from .model import block_forward
    return lambda x: block_forward(model, i, x, lambda b, name, inp: forward_quantized(layers[(b, name)], inp))


class _StagedBlock:
    """Block forward that caches each linear's input so a change to one linear
    only recomputes the stages after it."""

    def __init__(self, model: ToyModel, i: int, x: np.ndarray):
        self.model = model
        self.i = i
        self.x = x
        cfg = model.config
        self.groups = cfg.f if model.block_kind(i) == "frame" else 1
        self.heads = cfg.heads
        self.bias = model.blocks[i]["fc1_bias"]
        self.inputs: dict = {"qkv": layer_norm(x)}
        self.h: Optional[np.ndarray] = None

    def run(self, layers: dict, start: str = "qkv", commit: bool = False,
            pre_rotated: Optional[np.ndarray] = None) -> np.ndarray:
        inputs = dict(self.inputs) if not commit else self.inputs
        h = self.h
        names = LINEARS[LINEARS.index(start):]
        for name in names:
            inp = inputs[name]
            out = forward_quantized(layers[name], inp, pre_rotated if name == start else None)
            if name == "qkv":
                inputs["proj"] = _attention(out, self.heads, self.groups)
            elif name == "proj":
                h = self.x + out
                inputs["fc1"] = layer_norm(h)
            elif name == "fc1":
                inputs["fc2"] = gelu(out + self.bias)
            else:
                result = h + out
        if commit:
            self.h = h
        return result


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def coordinate_search(model: ToyModel, i: int, layers: dict, x_calib: np.ndarray, cfg: CalibConfig = CalibConfig(),
                      target: Optional[np.ndarray] = None):
    """Tune block ``i``'s quantized linears on ``x_calib``.

    ``layers`` maps linear name -> QuantLinear. Returns the updated mapping and
    the loss history (one entry per evaluated parameter group).
    """
    layers = dict(layers)
    if target is None:
        target = fp_block(model, i)(x_calib)
    staged = _StagedBlock(model, i, x_calib)
    best = _mse(staged.run(layers, commit=True), target)
    history = [best]

    def record(loss):
        if loss > history[-1]:
            raise NumericError(f"calibration loss increased: {history[-1]} -> {loss}")
        history.append(loss)

    grids = [cfg.grid] * cfg.passes + [cfg.refine_grid] * cfg.refine_passes
    passes_run = 0
    p = 0
    while p < len(grids):
        grid = grids[p]
        passes_run += 1
        improved = False
        for name in LINEARS:
            layer: QuantLinear = layers[name]
            if cfg.tune_scales and layer.scale is not None:
                d = layer.in_features
                width = cfg.chunk_width(d)
                x_rot = None
                if layer.rotation is not None:
                    # the tuned layer's input is fixed during its chunk loop
                    x_rot = apply_rotation(staged.inputs[name], layer.rotation)
                for lo in range(0, d, width):
                    base = layers[name]
                    for m in grid:
                        if m == 1.0:
                            continue
                        factors = np.ones(d)
                        factors[lo:lo + width] = m
                        cand = base.with_scale(base.scale.scaled(factors))
                        loss = _mse(staged.run({**layers, name: cand}, start=name, pre_rotated=x_rot), target)
                        if loss < best:
                            best, layers[name], improved = loss, cand, True
                    record(best)
                staged.run(layers, start=name, commit=True)
            if cfg.tune_deltas:
                cand = _propose_deltas(layers[name], model.blocks[i][name], staged.inputs[name], grid)
                if cand is not None:
                    loss = _mse(staged.run({**layers, name: cand}, start=name), target)
                    if loss < best:
                        best, layers[name], improved = loss, cand, True
                    record(best)
                staged.run(layers, start=name, commit=True)
        p += 1
        if not improved and p < cfg.passes:
            # coarse grid exhausted; jump straight to the refinement passes
            p = cfg.passes
    return layers, history, passes_run


def _propose_deltas(layer: QuantLinear, w_raw: np.ndarray, x_in: np.ndarray, grid: Sequence[float]) -> Optional[QuantLinear]:
    """Per-output-channel best multiplier by layer-local output error."""
    ref = x_in @ w_raw.T
    base_mult = layer.delta_mult
    errs, cands = [], []
    for m in grid:
        cand = layer if m == 1.0 else layer.with_delta_mult(base_mult * m)
        out = forward_quantized(cand, x_in)
        errs.append(np.sum((ref - out) ** 2, axis=tuple(range(out.ndim - 1))))
        cands.append(m)
    errs = np.stack(errs)
    # prefer 1.0 on ties so an already-optimal channel is left alone
    one = cands.index(1.0)
    pick = np.argmin(errs, axis=0)
    pick = np.where(errs[pick, np.arange(errs.shape[1])] < errs[one], pick, one)
    mult = np.asarray(cands)[pick]
    if np.all(mult == 1.0):
        return None
    return layer.with_delta_mult(base_mult * mult)


@dataclass
class BlockLog:
    block: int
    initial_loss: float
    final_loss: float
    passes: int
    wall_time: float


def calibrate_blockwise(model: ToyModel, calib_set: Sequence, scheme: QuantScheme, cfg: CalibConfig = CalibConfig(),
                        progress: Optional[Callable[[BlockLog], None]] = None):
    """Quantize and calibrate every block in order; returns ``(QuantizedModel, [BlockLog])``."""
    if len(calib_set) == 0:
        raise ValueError("empty calibration set")
    x = registered_batch(model, list(calib_set))
    all_layers, logs = {}, []
    for i in range(model.config.n_blocks):
        t0 = time.perf_counter()
        built = quantize_block(model, i, x, scheme)
        layers = {name: built[(i, name)] for name in LINEARS}
        target = fp_block(model, i)(x)
        layers, history, passes = coordinate_search(model, i, layers, x, cfg, target)
        for name, layer in layers.items():
            all_layers[(i, name)] = layer
        log = BlockLog(i, history[0], history[-1], passes, time.perf_counter() - t0)
        logs.append(log)
        if progress:
            progress(log)
        x = quant_block(model, i, all_layers)(x)
    return QuantizedModel(model, scheme, all_layers), logs
