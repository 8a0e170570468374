"""Simulated low-bit linear layer.

Weights are quantized once per output channel, activations per token at run
time, and the product is accumulated over integer codes before a single
rescale by ``delta_act[i] * delta_w[j]``. Four variants share the kernel:

* ``naive``    - quantize X and W directly
* ``rotation`` - Hadamard-rotate both sides first
* ``scale``    - per-channel smoothing only
* ``dsfq``     - rotate, then smooth in the rotated space
"""
from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DimensionError, FormatError, NumericError
from .quantizer import (
    Granularity,
    Mode,
    QuantizedTensor,
    QuantSpec,
    delta_from_max,
    dequantize,
    qqts_dumps,
    qqts_loads,
    quantize,
    quantize_values,
)
from .rotation import RotationOp, is_power_of_two, random_rotation
from .smoothing import (
    DEFAULT_ALPHA,
    SmoothScale,
    fuse_offline,
    smooth_scale_from_max,
    transform_activations,
)
from .tensor import as_tensor

# float64 represents every integer below 2**53 exactly
_EXACT_FLOAT_LIMIT = 2**53
_INT64_LIMIT = 2**63 - 1


class Variant(str, enum.Enum):
    NAIVE = "naive"
    ROTATION = "rotation"
    SCALE = "scale"
    DSFQ = "dsfq"

    @property
    def rotates(self) -> bool:
        return self in (Variant.ROTATION, Variant.DSFQ)

    @property
    def smooths(self) -> bool:
        return self in (Variant.SCALE, Variant.DSFQ)


_VARIANT_TAGS = {Variant.NAIVE: 0, Variant.ROTATION: 1, Variant.SCALE: 2, Variant.DSFQ: 3}


@dataclass(frozen=True)
class QuantScheme:
    variant: Variant = Variant.DSFQ
    act_spec: QuantSpec = QuantSpec(4, Granularity.PER_ROW, Mode.DYNAMIC)
    weight_spec: QuantSpec = QuantSpec(4, Granularity.PER_ROW, Mode.STATIC)
    alpha: float = DEFAULT_ALPHA
    order: str = "rot-scale"
    rotation_seed: int = 0
    identity_signs: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.act_spec.granularity is Granularity.PER_COLUMN:
            raise ValueError("per-channel activation steps would vary along the summation axis")
        if self.weight_spec.granularity is not Granularity.PER_ROW:
            raise ValueError("weights are quantized per output channel (rows of W)")
        if self.weight_spec.mode is not Mode.STATIC:
            raise ValueError("weights can only be quantized statically")

    @classmethod
    def make(
        cls,
        variant="dsfq",
        bits: int = 4,
        act_bits: Optional[int] = None,
        act_granularity=Granularity.PER_ROW,
        act_mode=Mode.DYNAMIC,
        **kw,
    ) -> "QuantScheme":
        act = QuantSpec(act_bits or bits, act_granularity, act_mode)
        return cls(Variant(variant), act, QuantSpec(bits, Granularity.PER_ROW, Mode.STATIC), **kw)


@dataclass(frozen=True, eq=False)
class QuantLinear:
    name: str
    scheme: QuantScheme
    in_features: int
    out_features: int
    w_q: QuantizedTensor = field(repr=False)
    rotation: Optional[RotationOp] = field(default=None, repr=False)
    scale: Optional[SmoothScale] = field(default=None, repr=False)
    act_static_max: Optional[np.ndarray] = field(default=None, repr=False)
    # Transformed float weights; kept so calibration can requantize. None after loading.
    w_fused: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    w_raw: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    delta_mult: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    # raw weights after rotation only (rot-scale order), so re-fusing skips the transform
    w_rot: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.w_q.deltas.shape != (self.out_features,):
            raise DimensionError("one weight step per output channel expected")
        v = self.scheme.variant
        if v.rotates != (self.rotation is not None) or v.smooths != (self.scale is not None):
            raise ValueError(f"transforms do not match variant {v.value}")

    def __eq__(self, other):
        # the serialized record covers exactly the deployable state
        if not isinstance(other, QuantLinear):
            return NotImplemented
        return layer_record_dumps(self) == layer_record_dumps(other)

    __hash__ = None

    @property
    def weight_deltas(self) -> np.ndarray:
        return self.w_q.deltas

    def with_scale(self, sc: SmoothScale) -> "QuantLinear":
        """Re-fuse the raw weights with new smooth scales and requantize."""
        if self.w_raw is None:
            raise ValueError("layer was loaded without float weights; cannot re-fuse")
        if self.w_rot is not None and self.scheme.order == "rot-scale":
            w_fused = self.w_rot * sc.c_hat
        else:
            w_fused = fuse_offline(self.w_raw, self.rotation, sc, self.scheme.order)
        w_q = _quantize_weights(w_fused, self.scheme.weight_spec, self.delta_mult)
        return replace(self, scale=sc, w_fused=w_fused, w_q=w_q)

    def with_delta_mult(self, mult) -> "QuantLinear":
        if self.w_fused is None:
            raise ValueError("layer was loaded without float weights; cannot requantize")
        mult = np.asarray(mult, dtype=np.float64)
        w_q = _quantize_weights(self.w_fused, self.scheme.weight_spec, mult)
        return replace(self, w_q=w_q, delta_mult=mult)


def _quantize_weights(w_fused: np.ndarray, spec: QuantSpec, mult=None) -> QuantizedTensor:
    deltas = delta_from_max(np.abs(w_fused).max(axis=1), spec.bits)
    if mult is not None:
        deltas = deltas * mult
    codes = quantize(w_fused, deltas[:, None], spec.bits).astype(np.int8)
    return QuantizedTensor(codes, deltas, spec)


def _act_groups_max(xt: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Max |x| per activation group over a calibration batch (static ranges)."""
    a = np.abs(xt)
    if spec.granularity is Granularity.PER_TENSOR:
        return a.max().reshape(1)
    # static per-token: one range per token position
    if xt.ndim == 2:
        return a.max(axis=1)
    return a.max(axis=(0, 2))


def build_quant_linear(w, calib_acts, scheme: QuantScheme, name: str = "") -> QuantLinear:
    """Transform, smooth and quantize one linear layer.

    ``w`` is ``d_out x d_in``; ``calib_acts`` are the layer's calibration inputs
    with ``d_in`` on the last axis (rank 2, or rank 3 as ``samples x tokens x d_in``).
    """
    w = as_tensor(w, 2, 2)
    x = as_tensor(calib_acts, 2, 3)
    d_out, d_in = w.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"calibration activations have {x.shape[-1]} channels, layer expects {d_in}")
    v = scheme.variant
    rot = None
    if v.rotates:
        if not is_power_of_two(d_in):
            raise DimensionError(f"rotation requires a power-of-two in_features, got {d_in}")
        rot = RotationOp.identity(d_in) if scheme.identity_signs else random_rotation(d_in, scheme.rotation_seed)
    sc = None
    w_rot = fuse_offline(w, rot, None) if rot is not None and scheme.order == "rot-scale" else None
    if v.smooths:
        # rot-scale: statistics from the rotated space; scale-rot: from the raw one
        if w_rot is not None:
            xs = transform_activations(x, rot, None)
            ws = w_rot
        else:
            xs, ws = x, w
        act_max = np.abs(xs).reshape(-1, d_in).max(axis=0)
        sc = smooth_scale_from_max(act_max, np.abs(ws).max(axis=0), scheme.alpha)
    w_fused = fuse_offline(w, rot, sc, scheme.order)
    w_q = _quantize_weights(w_fused, scheme.weight_spec)
    static = None
    if scheme.act_spec.mode is Mode.STATIC:
        static = _act_groups_max(transform_activations(x, rot, sc, scheme.order), scheme.act_spec)
    return QuantLinear(
        name, scheme, d_in, d_out, w_q, rot, sc, static,
        w_fused=w_fused, w_raw=w, delta_mult=np.ones(d_out), w_rot=w_rot,
    )


def _act_deltas(xt: np.ndarray, layer: QuantLinear) -> np.ndarray:
    """Activation step sizes broadcastable against ``xt`` (shape ``[..., rows, 1]``)."""
    spec = layer.scheme.act_spec
    if spec.mode is Mode.DYNAMIC:
        if spec.granularity is Granularity.PER_ROW:
            m = np.abs(xt).max(axis=-1, keepdims=True)
        elif xt.ndim == 3:
            m = np.abs(xt).max(axis=(1, 2), keepdims=True)
        else:
            m = np.abs(xt).max(keepdims=True)
        return delta_from_max(m, spec.bits)
    m = layer.act_static_max
    if spec.granularity is Granularity.PER_TENSOR:
        return delta_from_max(m, spec.bits).reshape((1,) * xt.ndim)
    if xt.shape[-2] != m.shape[0]:
        raise DimensionError(f"static per-token ranges cover {m.shape[0]} tokens, got {xt.shape[-2]}")
    return delta_from_max(m, spec.bits)[:, None]


def check_accumulator(d_in: int, act_bits: int, w_bits: int, limit: int = _INT64_LIMIT) -> int:
    """Worst-case |accumulator|; raises if it would not fit in ``limit``."""
    worst = d_in * 2 ** (act_bits - 1) * 2 ** (w_bits - 1)
    if worst > limit:
        raise NumericError(f"accumulator overflow: d_in={d_in} at W{w_bits}A{act_bits}")
    return worst


def int_matmul(a_codes: np.ndarray, w_codes: np.ndarray, worst: int) -> np.ndarray:
    """Exact integer ``a_codes @ w_codes.T`` with int64 results.

    When the worst-case magnitude is below 2**53 every partial sum is an exactly
    representable integer in float64, so BLAS gives the bit-identical answer of
    an int64 accumulation much faster than numpy's integer matmul.
    """
    if worst < _EXACT_FLOAT_LIMIT:
        acc = np.asarray(a_codes, dtype=np.float64) @ np.asarray(w_codes, dtype=np.float64).T
        return acc.astype(np.int64)
    return np.asarray(a_codes, dtype=np.int64) @ np.asarray(w_codes, dtype=np.int64).T


def quantize_activations(layer: QuantLinear, x, as_float: bool = False,
                         pre_rotated: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Activation codes and step sizes. ``as_float`` keeps the codes as integral float64.

    ``pre_rotated`` may carry ``apply_rotation(x, layer.rotation)`` when the
    caller reuses one input across many layers (rot-scale order only).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_features:
        raise DimensionError(f"input has {x.shape[-1]} features, layer expects {layer.in_features}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite activations")
    if pre_rotated is not None and layer.rotation is not None and layer.scheme.order == "rot-scale":
        xt = pre_rotated if layer.scale is None else pre_rotated / layer.scale.c_hat
    else:
        xt = transform_activations(x, layer.rotation, layer.scale, layer.scheme.order)
    d_act = _act_deltas(xt, layer)
    codes = quantize_values(xt, d_act, layer.scheme.act_spec.bits)
    return (codes if as_float else codes.astype(np.int64)), d_act


def forward_quantized(layer: QuantLinear, x, pre_rotated: Optional[np.ndarray] = None) -> np.ndarray:
    """Integer-accumulation forward: ``acc[i, j] * delta_act[i] * delta_w[j]``."""
    worst = check_accumulator(layer.in_features, layer.scheme.act_spec.bits, layer.scheme.weight_spec.bits)
    if worst < _EXACT_FLOAT_LIMIT:
        # same exact sums as int_matmul, minus the round trip through int64
        codes, d_act = quantize_activations(layer, x, as_float=True, pre_rotated=pre_rotated)
        acc = codes @ layer.w_q.codes.T.astype(np.float64)
    else:
        codes, d_act = quantize_activations(layer, x)
        acc = int_matmul(codes, layer.w_q.codes, worst)
    return acc * d_act * layer.w_q.deltas


def forward_simulated(layer: QuantLinear, x) -> np.ndarray:
    """Float fake-quant forward: dequantize both operands, then a float matmul."""
    codes, d_act = quantize_activations(layer, x)
    x_hat = dequantize(codes, d_act)
    w_hat = layer.w_q.dequantize()
    return x_hat @ w_hat.T


def forward_reference(w, x) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"input has {x.shape[-1]} features, weights expect {w.shape[1]}")
    return x @ w.T


def quant_layer_loss(layer: QuantLinear, w, x) -> float:
    diff = forward_reference(w, x) - forward_quantized(layer, x)
    return float(np.mean(diff * diff))


# -- serialization ---------------------------------------------------------
#
# record := u16 name_len | name utf-8 | u8 scheme tag | u32 d_in | u32 d_out
#           | u8 act_bits | u8 act_gran | u8 act_mode | f64 alpha | u8 order
#           | u8 has_rot  [i8 signs x d_in]
#           | u8 has_scale [f64 c_hat x d_in]
#           | u32 qqts_len | QQTS weight block
#           | u32 n_static [f64 x n_static]

_ORDER_TAGS = {"rot-scale": 0, "scale-rot": 1}


def layer_record_dumps(layer: QuantLinear) -> bytes:
    s = layer.scheme
    buf = io.BytesIO()
    name = layer.name.encode("utf-8")
    buf.write(struct.pack("<H", len(name)) + name)
    buf.write(struct.pack("<BII", _VARIANT_TAGS[s.variant], layer.in_features, layer.out_features))
    buf.write(struct.pack("<BBBdB", s.act_spec.bits, s.act_spec.granularity, s.act_spec.mode, s.alpha, _ORDER_TAGS[s.order]))
    if layer.rotation is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01" + layer.rotation.signs.astype(np.int8).tobytes())
    if layer.scale is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01" + layer.scale.c_hat.astype("<f8").tobytes())
    wq = qqts_dumps(layer.w_q)
    buf.write(struct.pack("<I", len(wq)) + wq)
    static = layer.act_static_max
    if static is None:
        buf.write(struct.pack("<I", 0))
    else:
        buf.write(struct.pack("<I", static.size) + static.astype("<f8").tobytes())
    return buf.getvalue()


def layer_record_loads(buf: bytes, offset: int = 0) -> tuple[QuantLinear, int]:
    """Decode one record starting at ``offset``; returns the layer and the next offset."""
    try:
        (n,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset:offset + n].decode("utf-8")
        offset += n
        tag, d_in, d_out = struct.unpack_from("<BII", buf, offset)
        offset += 9
        a_bits, a_gran, a_mode, alpha, order_tag = struct.unpack_from("<BBBdB", buf, offset)
        offset += 12
        rot = None
        if buf[offset]:
            signs = np.frombuffer(buf, dtype=np.int8, count=d_in, offset=offset + 1).copy()
            rot = RotationOp(d_in, signs)
            offset += d_in
        offset += 1
        sc = None
        if buf[offset]:
            sc = SmoothScale(np.frombuffer(buf, dtype="<f8", count=d_in, offset=offset + 1).copy(), alpha)
            offset += 8 * d_in
        offset += 1
        (qlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        w_q = qqts_loads(bytes(buf[offset:offset + qlen]))
        offset += qlen
        (n_static,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        static = None
        if n_static:
            static = np.frombuffer(buf, dtype="<f8", count=n_static, offset=offset).copy()
            offset += 8 * n_static
    except (struct.error, IndexError, ValueError) as exc:
        raise FormatError(f"corrupt layer record: {exc}") from exc
    variant = {t: v for v, t in _VARIANT_TAGS.items()}[tag]
    order = {t: o for o, t in _ORDER_TAGS.items()}[order_tag]
    scheme = QuantScheme(
        variant, QuantSpec(a_bits, Granularity(a_gran), Mode(a_mode)), w_q.spec, alpha, order,
        identity_signs=rot is not None and rot.is_unsigned,
    )
    return QuantLinear(name, scheme, d_in, d_out, w_q, rot, sc, static), offset
