"""Normalized (randomized) Hadamard rotations.

The represented matrix is ``diag(signs) @ H_d / sqrt(d)`` where ``H_d`` is the
Sylvester Hadamard matrix, so a row vector has its signs flipped before the
transform. Flipping first keeps a constant (DC) component from collapsing into
channel 0. Applying it costs O(d log d) through the fast Walsh-Hadamard
transform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import DimensionError, UnsupportedDimensionError
from .tensor import make_rng


def is_power_of_two(d: int) -> bool:
    return d >= 1 and (d & (d - 1)) == 0


def _check_dim(d: int) -> None:
    if not is_power_of_two(int(d)):
        raise UnsupportedDimensionError(f"Hadamard size must be a power of two, got {d}")


# below this size a dense BLAS product beats the butterfly loop in numpy
DENSE_MAX_DIM = 512


def hadamard_matrix(d: int) -> np.ndarray:
    """Orthonormal Sylvester Hadamard matrix of size ``d`` (entries +-1/sqrt(d))."""
    return _hadamard_cached(int(d)).copy()


@lru_cache(maxsize=16)
def _hadamard_cached(d: int) -> np.ndarray:
    _check_dim(d)
    h = np.ones((1, 1))
    while h.shape[0] < d:
        h = np.block([[h, h], [h, -h]])
    h = h / np.sqrt(d)
    h.setflags(write=False)
    return h


def fwht(x: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform along the last axis (Sylvester order)."""
    x = np.array(x, dtype=np.float64)
    d = x.shape[-1]
    _check_dim(d)
    lead = x.shape[:-1]
    y = x.reshape(-1, d)
    h = 1
    while h < d:
        y = y.reshape(y.shape[0], d // (2 * h), 2, h)
        a = y[:, :, 0, :]
        b = y[:, :, 1, :]
        y = np.stack((a + b, a - b), axis=2)
        h *= 2
    return y.reshape(*lead, d)


@dataclass(frozen=True)
class RotationOp:
    dim: int
    signs: np.ndarray = field(repr=False)
    seed: Optional[int] = None

    def __post_init__(self):
        _check_dim(self.dim)
        signs = np.asarray(self.signs, dtype=np.int8)
        if signs.shape != (self.dim,) or not np.all(np.abs(signs) == 1):
            raise ValueError("signs must be a +-1 vector of length dim")
        signs.setflags(write=False)
        object.__setattr__(self, "signs", signs)

    @classmethod
    def identity(cls, dim: int) -> "RotationOp":
        """Plain normalized Hadamard transform (all signs +1)."""
        return cls(dim, np.ones(dim, dtype=np.int8))

    @property
    def matrix(self) -> np.ndarray:
        return self.signs[:, None].astype(np.float64) * hadamard_matrix(self.dim)

    @property
    def is_unsigned(self) -> bool:
        return bool(np.all(self.signs == 1))


def random_rotation(d: int, seed: int) -> RotationOp:
    _check_dim(d)
    rng = make_rng(seed)
    signs = np.where(rng.integers(0, 2, size=d) == 1, 1, -1).astype(np.int8)
    return RotationOp(d, signs, seed)


def apply_rotation(x, rot: RotationOp) -> np.ndarray:
    """``x @ rot.matrix`` on the last axis, via the fast transform."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != rot.dim:
        raise DimensionError(f"last axis {x.shape[-1]} does not match rotation dim {rot.dim}")
    if not rot.is_unsigned:
        x = x * rot.signs
    if rot.dim <= DENSE_MAX_DIM:
        return x @ _hadamard_cached(rot.dim)
    return fwht(x) / np.sqrt(rot.dim)
