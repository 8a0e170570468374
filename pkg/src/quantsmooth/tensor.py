"""Dense float64 tensors, axis statistics, seeded generation and the QTSR file format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and rank 1-3.
Every stochastic helper takes an explicit generator built by :func:`make_rng`,
which wraps numpy's counter-based Philox bit generator so that a given seed
yields the same stream on every platform.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, FormatError, NumericError

QTSR_MAGIC = b"QTSR"
QTSR_VERSION = 1


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox-backed generator. Extra ``key`` integers derive independent sub-streams."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence([int(seed), *map(int, key)])
    return np.random.Generator(np.random.Philox(ss))


def as_tensor(x, min_rank: int = 1, max_rank: int = 3) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not (min_rank <= arr.ndim <= max_rank):
        raise DimensionError(f"expected rank {min_rank}..{max_rank}, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError("empty tensor")
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


def matmul(a, b_t) -> np.ndarray:
    """``a @ b_t.T`` with float64 accumulation: ``C[i, j] = sum_t a[i, t] * b_t[j, t]``."""
    a = as_tensor(a, 2, 2)
    b_t = as_tensor(b_t, 2, 2)
    if a.shape[1] != b_t.shape[1]:
        raise DimensionError(f"inner dimensions differ: {a.shape} vs {b_t.shape}")
    return a @ b_t.T


@dataclass(frozen=True)
class AxisStats:
    axis: str
    mean: np.ndarray
    var: np.ndarray
    max_abs: np.ndarray


def axis_stats(x, axis: str = "rows") -> AxisStats:
    """Per-slice mean, population variance and max |x|.

    ``axis="rows"`` gives one value per row (reducing over columns),
    ``axis="cols"`` one value per column.
    """
    x = as_tensor(x, 2, 2)
    if axis == "rows":
        red = 1
    elif axis == "cols":
        red = 0
    else:
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    mean = x.mean(axis=red)
    var = x.var(axis=red)
    return AxisStats(axis, mean, np.maximum(var, 0.0), np.abs(x).max(axis=red))


def excess_kurtosis(x) -> float:
    x = as_tensor(x).ravel()
    if x.size < 4:
        raise DimensionError("kurtosis needs at least 4 elements")
    c = x - x.mean()
    m2 = np.mean(c * c)
    if m2 <= 0.0:
        raise NumericError("zero variance")
    return float(np.mean(c**4) / (m2 * m2) - 3.0)


def gen_gaussian(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    return rng.standard_normal(tuple(shape))


def gen_heavy_tailed(
    rng: np.random.Generator,
    shape: Sequence[int],
    outlier_channels: Sequence[int],
    outlier_scale: float,
) -> np.ndarray:
    """Gaussian base with the listed channels (last axis) multiplied by ``outlier_scale``."""
    if outlier_scale < 1:
        raise ValueError("outlier_scale must be >= 1")
    x = gen_gaussian(rng, shape)
    n_ch = x.shape[-1]
    idx = np.asarray(list(outlier_channels), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n_ch):
        raise DimensionError(f"outlier channel out of range for {n_ch} channels")
    x[..., idx] *= outlier_scale
    return x


# -- QTSR ------------------------------------------------------------------


def qtsr_dumps(x) -> bytes:
    arr = np.asarray(x)
    if not (1 <= arr.ndim <= 3):
        raise DimensionError(f"QTSR stores rank 1-3, got {arr.ndim}")
    header = QTSR_MAGIC + struct.pack("<BB", QTSR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def qtsr_loads(buf: bytes) -> np.ndarray:
    """Decode a QTSR blob. Data stays float32 so a load/dump cycle is bit-exact."""
    if buf[:4] != QTSR_MAGIC:
        raise FormatError("bad QTSR magic")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != QTSR_VERSION:
        raise FormatError(f"unsupported QTSR version {version}")
    if not 1 <= rank <= 3:
        raise FormatError(f"bad QTSR rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    off = 6 + 4 * rank
    count = int(np.prod(dims))
    if len(buf) != off + 4 * count:
        raise FormatError("QTSR payload length does not match dims")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def save_qtsr(path, x) -> None:
    Path(path).write_bytes(qtsr_dumps(x))


def load_qtsr(path) -> np.ndarray:
    return qtsr_loads(Path(path).read_bytes())
