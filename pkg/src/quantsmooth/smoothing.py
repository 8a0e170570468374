"""Per-channel smoothing in the rotated space and the combined rotate+scale transform.

For activations ``X`` (tokens x d_in) and weights ``W`` (d_out x d_in):

    X' = X R diag(c)^-1        W' = W R diag(c)        X' W'^T == X W^T

with ``R`` an orthonormal Hadamard rotation and ``c`` a positive per-channel
scale. ``order="scale-rot"`` applies the scale first and the rotation second;
it exists for the ordering ablation only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, NumericError
from .rotation import RotationOp, apply_rotation

SCALE_CLIP = (1e-4, 1e4)
DEFAULT_ALPHA = 0.5
ORDERS = ("rot-scale", "scale-rot")


@dataclass(frozen=True)
class SmoothScale:
    c_hat: np.ndarray = field(repr=False)
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        c = np.array(self.c_hat, dtype=np.float64)
        if c.ndim != 1:
            raise DimensionError("c_hat must be a vector")
        if not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise NumericError("smooth scales must be positive and finite")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        c.setflags(write=False)
        object.__setattr__(self, "c_hat", c)

    @classmethod
    def ones(cls, dim: int, alpha: float = DEFAULT_ALPHA) -> "SmoothScale":
        return cls(np.ones(dim), alpha)

    @property
    def dim(self) -> int:
        return self.c_hat.shape[0]

    def scaled(self, factors) -> "SmoothScale":
        """A copy with ``c_hat * factors``, clipped to the allowed range."""
        return SmoothScale(np.clip(self.c_hat * factors, *SCALE_CLIP), self.alpha)


def smooth_scale_from_max(act_max, w_max, alpha: float = DEFAULT_ALPHA, clip: bool = True) -> SmoothScale:
    act_max = np.asarray(act_max, dtype=np.float64)
    w_max = np.asarray(w_max, dtype=np.float64)
    if act_max.shape != w_max.shape:
        raise DimensionError(f"channel counts differ: {act_max.shape} vs {w_max.shape}")
    dead = (act_max <= 0) | (w_max <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.power(act_max, alpha) / np.power(w_max, 1.0 - alpha)
    c = np.where(dead, 1.0, c)
    if clip:
        c = np.clip(c, *SCALE_CLIP)
    return SmoothScale(c, alpha)


def compute_smooth_scale(x_rot, w_rot, alpha: float = DEFAULT_ALPHA, clip: bool = True) -> SmoothScale:
    """Channel scales from already-rotated activations and weights.

    ``c_i = max|x_rot[:, i]|**alpha / max|w_rot[:, i]|**(1 - alpha)``; channels
    where either maximum is zero get 1.
    """
    x_rot = np.asarray(x_rot, dtype=np.float64)
    w_rot = np.asarray(w_rot, dtype=np.float64)
    if x_rot.shape[-1] != w_rot.shape[-1]:
        raise DimensionError("activation and weight channel counts differ")
    act_max = np.abs(x_rot).reshape(-1, x_rot.shape[-1]).max(axis=0)
    w_max = np.abs(w_rot).max(axis=0)
    return smooth_scale_from_max(act_max, w_max, alpha, clip)


def _check(d: int, rot: Optional[RotationOp], sc: Optional[SmoothScale]) -> None:
    if rot is not None and rot.dim != d:
        raise DimensionError(f"rotation dim {rot.dim} != {d}")
    if sc is not None:
        if sc.dim != d:
            raise DimensionError(f"scale dim {sc.dim} != {d}")
        if np.any(sc.c_hat <= 0):
            raise NumericError("nonpositive smooth scale")


def transform_activations(x, rot: Optional[RotationOp], sc: Optional[SmoothScale], order: str = "rot-scale"):
    """Online side: ``X R diag(c)^-1`` (or ``X diag(c)^-1 R`` for ``scale-rot``)."""
    x = np.asarray(x, dtype=np.float64)
    _check(x.shape[-1], rot, sc)
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    if order == "scale-rot" and sc is not None:
        x = x / sc.c_hat
    if rot is not None:
        x = apply_rotation(x, rot)
    if order == "rot-scale" and sc is not None:
        x = x / sc.c_hat
    return x


def fuse_offline(w, rot: Optional[RotationOp], sc: Optional[SmoothScale], order: str = "rot-scale") -> np.ndarray:
    """Offline side: ``W R diag(c)``, computed once and stored in place of ``W``."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError("weights must be 2-D (d_out x d_in)")
    _check(w.shape[1], rot, sc)
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    if order == "scale-rot" and sc is not None:
        w = w * sc.c_hat
    if rot is not None:
        w = apply_rotation(w, rot)
    if order == "rot-scale" and sc is not None:
        w = w * sc.c_hat
    return w


def apply_dual_smooth(x, w, rot: Optional[RotationOp], sc: Optional[SmoothScale], order: str = "rot-scale"):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[-1] != w.shape[-1]:
        raise DimensionError(f"in_features differ: {x.shape} vs {w.shape}")
    return transform_activations(x, rot, sc, order), fuse_offline(w, rot, sc, order)
