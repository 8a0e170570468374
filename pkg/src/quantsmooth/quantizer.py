"""Symmetric uniform quantization at tensor, row and column granularity.

Rounding is half-away-from-zero everywhere; an all-zero group falls back to
``ZERO_DELTA`` so that every step size stays strictly positive.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, NumericError
from .tensor import as_tensor

SUPPORTED_BITS = (4, 6, 8)
ZERO_DELTA = 1e-8
QQTS_MAGIC = b"QQTS"


class Granularity(enum.IntEnum):
    PER_TENSOR = 0
    PER_ROW = 1
    PER_COLUMN = 2


class Mode(enum.IntEnum):
    STATIC = 0
    DYNAMIC = 1


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 4
    granularity: Granularity = Granularity.PER_TENSOR
    mode: Mode = Mode.DYNAMIC

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def qrange(bits: int) -> tuple[int, int]:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def round_half_away(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.abs(v)
    out += 0.5
    np.floor(out, out=out)
    return np.copysign(out, v, out=out)


def delta_from_max(max_abs, bits: int) -> np.ndarray:
    """Step size from a (vector of) max |x|, with the zero-max fallback applied."""
    _, qmax = qrange(bits)
    m = np.asarray(max_abs, dtype=np.float64)
    return np.where(m > 0, m / qmax, ZERO_DELTA)


def compute_delta(x, bits: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input to compute_delta")
    return float(delta_from_max(np.abs(x).max(initial=0.0), bits))


def quantize_values(x, delta, bits: int) -> np.ndarray:
    """Same codes as :func:`quantize`, kept as (exactly integral) float64."""
    qmin, qmax = qrange(bits)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise NumericError("delta must be positive")
    codes = round_half_away(np.asarray(x, dtype=np.float64) / delta)
    return np.clip(codes, qmin, qmax, out=codes)


def quantize(x, delta, bits: int) -> np.ndarray:
    """Integer codes ``clamp(round(x / delta))``; ``delta`` broadcasts against ``x``."""
    return quantize_values(x, delta, bits).astype(np.int64)


def dequantize(codes, delta) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * np.asarray(delta, dtype=np.float64)


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    deltas: np.ndarray
    spec: QuantSpec

    def __post_init__(self):
        n = _group_count(self.codes.shape, self.spec.granularity)
        if self.deltas.shape != (n,):
            raise DimensionError(f"expected {n} deltas, got {self.deltas.shape}")
        if np.any(self.deltas <= 0):
            raise NumericError("deltas must be positive")

    @property
    def shape(self):
        return self.codes.shape

    def broadcast_deltas(self) -> np.ndarray:
        return broadcast_deltas(self.deltas, self.spec.granularity)

    def dequantize(self) -> np.ndarray:
        return dequantize(self.codes, self.broadcast_deltas())

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.deltas, other.deltas)
        )


def broadcast_deltas(deltas: np.ndarray, granularity: Granularity) -> np.ndarray:
    if granularity is Granularity.PER_TENSOR:
        return deltas.reshape(1, 1)
    if granularity is Granularity.PER_ROW:
        return deltas[:, None]
    return deltas[None, :]


def _group_count(shape, granularity: Granularity) -> int:
    if granularity is Granularity.PER_TENSOR:
        return 1
    if granularity is Granularity.PER_ROW:
        return shape[0]
    return shape[1]


def group_max(x: np.ndarray, granularity: Granularity) -> np.ndarray:
    a = np.abs(x)
    if granularity is Granularity.PER_TENSOR:
        return a.max(keepdims=False).reshape(1)
    if granularity is Granularity.PER_ROW:
        return a.max(axis=1)
    return a.max(axis=0)


def quantize_tensor(x, spec: QuantSpec) -> QuantizedTensor:
    x = as_tensor(x, 2, 2)
    deltas = delta_from_max(group_max(x, spec.granularity), spec.bits)
    codes = quantize(x, broadcast_deltas(deltas, spec.granularity), spec.bits)
    return QuantizedTensor(codes.astype(np.int8), deltas, spec)


def quant_mse(x, spec: QuantSpec) -> float:
    x = as_tensor(x, 2, 2)
    err = x - quantize_tensor(x, spec).dequantize()
    return float(np.mean(err * err))


def coherence(x) -> float:
    """``max|x| * sqrt(g) / ||x||_F``: 1 for a flat slice, sqrt(g) for a one-hot one."""
    x = as_tensor(x).ravel()
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        raise NumericError("coherence of a zero vector is undefined")
    return float(np.abs(x).max() * np.sqrt(x.size) / norm)


# -- QQTS ------------------------------------------------------------------


def qqts_dumps(qt: QuantizedTensor) -> bytes:
    codes = np.asarray(qt.codes)
    out = QQTS_MAGIC + struct.pack("<BBBB", qt.spec.bits, qt.spec.granularity, qt.spec.mode, codes.ndim)
    out += struct.pack(f"<{codes.ndim}I", *codes.shape)
    out += np.ascontiguousarray(qt.deltas, dtype="<f8").tobytes()
    return out + np.ascontiguousarray(codes, dtype=np.int8).tobytes()


def qqts_loads(buf: bytes) -> QuantizedTensor:
    if buf[:4] != QQTS_MAGIC:
        raise FormatError("bad QQTS magic")
    bits, gran, mode, rank = struct.unpack_from("<BBBB", buf, 4)
    if rank != 2:
        raise FormatError(f"QQTS stores rank-2 tensors, got rank {rank}")
    try:
        spec = QuantSpec(bits, Granularity(gran), Mode(mode))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    n_delta = _group_count(dims, spec.granularity)
    deltas = np.frombuffer(buf, dtype="<f8", count=n_delta, offset=off).astype(np.float64)
    off += 8 * n_delta
    count = int(np.prod(dims))
    if len(buf) != off + count:
        raise FormatError("QQTS payload length does not match dims")
    codes = np.frombuffer(buf, dtype=np.int8, count=count, offset=off).reshape(dims).copy()
    return QuantizedTensor(codes, deltas, spec)


def save_qqts(path, qt: QuantizedTensor) -> None:
    Path(path).write_bytes(qqts_dumps(qt))


def load_qqts(path) -> QuantizedTensor:
    return qqts_loads(Path(path).read_bytes())
