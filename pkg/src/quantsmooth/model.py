"""Miniature alternating-attention transformer and a synthetic multi-frame scene generator.

Each scene has ``f`` frames of ``s`` patch tokens. Registration appends five
special tokens (one camera + four register tokens) to every frame: the first
frame gets the set ``t_first``, all later frames share ``t_other``. Blocks
alternate between frame attention (tokens only see their own frame) and
global attention over the whole scene. Special tokens carry a large
magnitude on four fixed channels, which is what makes the activations
heavy-tailed.

Every MLP also carries a handful of biased "saliency" units that read the
special channels and write them back once they exceed a threshold. Patch
tokens rarely cross it, special tokens always do, so the special-token
outliers grow with depth the way massive activations do in trained
transformers.

Patch features live in a fixed random orthonormal basis with a decaying
spectrum (see :func:`world_basis`), and the output projections write mostly
into the same leading directions. The resulting anisotropy is not axis
aligned, so it survives a Hadamard rotation as uneven per-channel ranges.

Only the linear projections (``qkv``, ``proj``, ``fc1``, ``fc2``) are
quantized; attention itself runs in float64.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, FormatError, NumericError
from .qlinear import QuantLinear, QuantScheme, build_quant_linear, forward_quantized, layer_record_dumps, layer_record_loads
from .rotation import is_power_of_two
from .tensor import load_qtsr, make_rng, save_qtsr

N_SPECIAL = 5
LINEARS = ("qkv", "proj", "fc1", "fc2")
LN_EPS = 1e-5
# how strongly the output projections write back into the residual stream
RESIDUAL_GAIN = 0.5
# saliency units fire once a layer-normed special channel exceeds this
SALIENCY_THRESHOLD = 2.5
_OUTLIER_KEY = 0x0D1E
_BASIS_KEY = 0xBA5E


@dataclass(frozen=True)
class ToyModelConfig:
    d: int = 64
    s: int = 16
    f: int = 4
    n_blocks: int = 8
    heads: int = 4
    special_token_scale: float = 20.0
    seed: int = 0
    mlp_ratio: int = 4
    saliency_gain: float = 1.0
    anisotropy_decay: float = 6.0

    def __post_init__(self):
        if not is_power_of_two(self.d):
            raise DimensionError(f"embed dim must be a power of two, got {self.d}")
        if self.d % self.heads:
            raise DimensionError("embed dim must be divisible by heads")
        if self.f < 2:
            raise DimensionError("scenes need at least two frames")

    @property
    def tokens_per_frame(self) -> int:
        return self.s + N_SPECIAL

    @property
    def n_tokens(self) -> int:
        return self.tokens_per_frame * self.f


@dataclass(frozen=True)
class Scene:
    frames: np.ndarray  # f x s x d patch tokens
    domain_id: int = -1
    is_outlier: bool = False
    scene_id: int = 0


@dataclass
class ToyModel:
    config: ToyModelConfig
    blocks: list  # list of {linear name: d_out x d_in weight, "fc1_bias": hidden}
    t_first: np.ndarray
    t_other: np.ndarray
    special_channels: np.ndarray

    def block_kind(self, i: int) -> str:
        return "frame" if i % 2 == 0 else "global"

    def weight(self, block: int, name: str) -> np.ndarray:
        return self.blocks[block][name]


def _world_spectrum(d: int, decay: float):
    q, _ = np.linalg.qr(make_rng(_BASIS_KEY, d).standard_normal((d, d)))
    sv = np.exp(-np.arange(d) / decay)
    sv *= np.sqrt(d / np.sum(sv * sv))
    return q, sv


def world_basis(d: int, decay: float) -> np.ndarray:
    """``d x d`` map from isotropic noise to feature space: ``diag(spectrum) @ Q.T``.

    ``Q`` is a fixed random orthonormal basis (it depends only on ``d``) and the
    spectrum decays as ``exp(-k / decay)``, normalized to unit mean power.
    ``decay <= 0`` gives the identity.
    """
    if decay <= 0:
        return np.eye(d)
    q, sv = _world_spectrum(d, decay)
    return sv[:, None] * q.T


def _residual_writer(d: int, decay: float) -> np.ndarray:
    """``Q diag(spectrum) Q.T``: biases block outputs toward the leading directions."""
    if decay <= 0:
        return np.eye(d)
    q, sv = _world_spectrum(d, decay)
    return (q * sv) @ q.T


def build_model(config: ToyModelConfig = ToyModelConfig()) -> ToyModel:
    d, hidden = config.d, config.d * config.mlp_ratio
    rng = make_rng(config.seed, 1)
    special_channels = np.sort(rng.choice(d, size=4, replace=False))

    def special_set():
        t = rng.standard_normal((N_SPECIAL, d))
        t[:, special_channels] *= config.special_token_scale
        return t

    t_first, t_other = special_set(), special_set()
    shapes = {"qkv": (3 * d, d), "proj": (d, d), "fc1": (hidden, d), "fc2": (d, hidden)}
    writer = _residual_writer(d, config.anisotropy_decay)
    blocks = []
    for _ in range(config.n_blocks):
        ws = {}
        for name in LINEARS:
            d_out, d_in = shapes[name]
            w = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
            if name in ("proj", "fc2"):
                w = RESIDUAL_GAIN * (writer @ w)
            ws[name] = w
        bias = np.zeros(hidden)
        if config.saliency_gain > 0:
            # one unit per polarity so both signs of a special channel grow
            for k, c in enumerate(special_channels):
                for j, sign in ((2 * k, 1.0), (2 * k + 1, -1.0)):
                    ws["fc1"][j] = 0.0
                    ws["fc1"][j, c] = sign
                    ws["fc2"][:, j] = 0.0
                    ws["fc2"][c, j] = sign * config.saliency_gain
                    bias[j] = -SALIENCY_THRESHOLD
        ws["fc1_bias"] = bias
        for w in ws.values():
            w.setflags(write=False)
        blocks.append(ws)
    return ToyModel(config, blocks, t_first, t_other, special_channels)


# -- token registration ----------------------------------------------------


def register_tokens(scene, t_first: np.ndarray, t_other: np.ndarray) -> np.ndarray:
    """Append special tokens per frame; frame-major ``(f * (s + 5)) x d`` layout."""
    frames = np.asarray(scene.frames if isinstance(scene, Scene) else scene, dtype=np.float64)
    if frames.ndim != 3:
        raise DimensionError("scene frames must be f x s x d")
    f, _, d = frames.shape
    if t_first.shape != (N_SPECIAL, d) or t_other.shape != (N_SPECIAL, d):
        raise DimensionError(f"special token sets must be {N_SPECIAL} x {d}")
    parts = []
    for k in range(f):
        parts.append(frames[k])
        parts.append(t_first if k == 0 else t_other)
    return np.concatenate(parts, axis=0)


def registered_batch(model: ToyModel, scenes: Sequence) -> np.ndarray:
    return np.stack([register_tokens(sc, model.t_first, model.t_other) for sc in scenes])


# -- forward ---------------------------------------------------------------


def layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def _attention(qkv: np.ndarray, heads: int, groups: int) -> np.ndarray:
    """Softmax attention; ``groups`` splits the token axis into independent windows."""
    b, n, three_d = qkv.shape
    d = three_d // 3
    dh = d // heads
    t = n // groups
    qkv = qkv.reshape(b * groups, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return out


LinearFn = Callable[[int, str, np.ndarray], np.ndarray]


def fp_linear(model: ToyModel) -> LinearFn:
    return lambda i, name, x: x @ model.blocks[i][name].T


def block_forward(model: ToyModel, i: int, x: np.ndarray, linear: LinearFn, capture: Optional[dict] = None) -> np.ndarray:
    """One pre-norm block. ``capture`` (if given) receives each linear's input under its name."""
    cfg = model.config
    groups = cfg.f if model.block_kind(i) == "frame" else 1

    def lin(name, inp):
        if capture is not None:
            capture[name] = inp
        return linear(i, name, inp)

    a = layer_norm(x)
    att = _attention(lin("qkv", a), cfg.heads, groups)
    h = x + lin("proj", att)
    m = gelu(lin("fc1", layer_norm(h)) + model.blocks[i]["fc1_bias"])
    return h + lin("fc2", m)


@dataclass
class ForwardResult:
    block_inputs: list  # per block, B x n x d
    final: np.ndarray  # B x n x d


def forward_tokens(model: ToyModel, x: np.ndarray, linear: Optional[LinearFn] = None, chunk: int = 64) -> ForwardResult:
    """Forward a ``B x n x d`` batch of registered tokens."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.shape[1:] != (model.config.n_tokens, model.config.d):
        raise DimensionError(f"expected B x {model.config.n_tokens} x {model.config.d}, got {x.shape}")
    linear = linear or fp_linear(model)
    inputs = [[] for _ in range(model.config.n_blocks)]
    finals = []
    for start in range(0, x.shape[0], chunk):
        h = x[start:start + chunk]
        for i in range(model.config.n_blocks):
            inputs[i].append(h)
            h = block_forward(model, i, h, linear)
        finals.append(h)
    block_inputs = [np.concatenate(parts) for parts in inputs]
    final = np.concatenate(finals)
    if not np.all(np.isfinite(final)):
        raise NumericError("forward pass diverged")
    if squeeze:
        block_inputs = [b[0] for b in block_inputs]
        final = final[0]
    return ForwardResult(block_inputs, final)


def forward(model: ToyModel, scenes, linear: Optional[LinearFn] = None) -> ForwardResult:
    """Forward one scene (returns unbatched arrays) or a sequence of scenes."""
    if isinstance(scenes, Scene):
        return forward_tokens(model, register_tokens(scenes, model.t_first, model.t_other), linear)
    return forward_tokens(model, registered_batch(model, scenes), linear)


# -- scene generation ------------------------------------------------------

# inter-frame correlation to frame 0, one row per domain (f = 4)
_DOMAIN_PROFILES = np.array([
    [0.95, 0.85, 0.75],
    [0.30, 0.30, 0.30],
    [0.90, 0.10, 0.90],
    [0.10, 0.70, -0.40],
])


def domain_profile(domain_id: int, f: int) -> np.ndarray:
    """Correlation of frames 1..f-1 with frame 0 for a domain."""
    if f == 4 and domain_id < len(_DOMAIN_PROFILES):
        return _DOMAIN_PROFILES[domain_id]
    rng = make_rng(0xD0, domain_id, f)
    return rng.uniform(-0.5, 0.95, size=f - 1)


def gen_scene(domain_id: int, rng: np.random.Generator, config: ToyModelConfig = ToyModelConfig(),
              outlier: bool = False, scene_id: int = 0) -> Scene:
    s, f, d = config.s, config.f, config.d
    rho = domain_profile(domain_id, f)
    base = rng.standard_normal((s, d))
    frames = [base]
    for t in range(1, f):
        r = rho[t - 1]
        frames.append(r * base + np.sqrt(1.0 - r * r) * rng.standard_normal((s, d)))
    frames = np.stack(frames) @ world_basis(d, config.anisotropy_decay)
    if outlier:
        # inflated patch statistics: larger overall energy plus a few hot channels
        hot = rng.choice(d, size=4, replace=False)
        frames *= 3.0
        frames[..., hot] *= 8.0
    return Scene(frames, domain_id, outlier, scene_id)


def gen_pool(n_domains: int = 4, per_domain: int = 100, outlier_frac: float = 0.05, seed: int = 0,
             config: ToyModelConfig = ToyModelConfig()) -> list:
    """``n_domains * per_domain`` scenes, domains interleaved, a fraction flagged as outliers."""
    if not 0.0 <= outlier_frac <= 0.2:
        raise ValueError("outlier_frac must lie in [0, 0.2]")
    total = n_domains * per_domain
    n_out = int(round(outlier_frac * total))
    flagged = set(make_rng(seed, _OUTLIER_KEY).choice(total, size=n_out, replace=False).tolist())
    return [
        gen_scene(i % n_domains, make_rng(seed, i), config, outlier=i in flagged, scene_id=i)
        for i in range(total)
    ]


# -- quantized model -------------------------------------------------------


@dataclass
class QuantizedModel:
    model: ToyModel
    scheme: Optional[QuantScheme]
    layers: dict = field(default_factory=dict)  # (block, name) -> QuantLinear

    def linear(self) -> LinearFn:
        if self.scheme is None:
            return fp_linear(self.model)
        return lambda i, name, x: forward_quantized(self.layers[(i, name)], x)

    def forward(self, scenes) -> ForwardResult:
        return forward(self.model, scenes, self.linear())


def quantize_block(model: ToyModel, i: int, x_in: np.ndarray, scheme: QuantScheme) -> dict:
    """Build all quantized linears of block ``i`` from its full-precision internals on ``x_in``."""
    cap = {}
    block_forward(model, i, x_in, fp_linear(model), capture=cap)
    return {
        (i, name): build_quant_linear(model.blocks[i][name], cap[name], scheme, name=f"block{i}.{name}")
        for name in LINEARS
    }


def quantize_model(model: ToyModel, calib_set: Sequence, scheme: Optional[QuantScheme]) -> QuantizedModel:
    """Replace every linear with its quantized version; ``scheme=None`` keeps full precision."""
    if len(calib_set) == 0:
        raise ValueError("empty calibration set")
    if scheme is None:
        return QuantizedModel(model, None)
    res = forward(model, list(calib_set))
    layers = {}
    for i in range(model.config.n_blocks):
        layers.update(quantize_block(model, i, res.block_inputs[i], scheme))
    return QuantizedModel(model, scheme, layers)


def model_quant_loss(model: ToyModel, qmodel: QuantizedModel, eval_set: Sequence, fp_final: Optional[np.ndarray] = None) -> float:
    """Mean over scenes of the final-feature MSE between full precision and quantized."""
    if fp_final is None:
        fp_final = forward(model, list(eval_set)).final
    q_final = qmodel.forward(list(eval_set)).final
    return float(np.mean((fp_final - q_final) ** 2))


# -- files -----------------------------------------------------------------


def save_pool(directory, pool: Sequence[Scene], config: ToyModelConfig, meta: Optional[dict] = None) -> None:
    """QTSR file per scene plus ``manifest.json``; generator labels go to ``oracle.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries, oracle = [], []
    for sc in pool:
        fname = f"scene_{sc.scene_id:05d}.qtsr"
        save_qtsr(out / fname, sc.frames)
        entries.append({"scene_id": sc.scene_id, "file": fname, "f": config.f, "s": config.s, "d": config.d})
        oracle.append({"scene_id": sc.scene_id, "domain_id": sc.domain_id, "is_outlier": sc.is_outlier})
    manifest = {"meta": meta or {}, "model": asdict(config), "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (out / "oracle.json").write_text(json.dumps({"meta": meta or {}, "scenes": oracle}, indent=1, sort_keys=True))


def load_pool(directory, with_oracle: bool = False) -> list:
    """Scenes from disk (float32 data widened to float64). Labels only on request."""
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    labels = {}
    if with_oracle:
        for row in json.loads((src / "oracle.json").read_text())["scenes"]:
            labels[row["scene_id"]] = row
    pool = []
    for e in manifest["scenes"]:
        frames = load_qtsr(src / e["file"]).astype(np.float64)
        if frames.shape != (e["f"], e["s"], e["d"]):
            raise DimensionError(f"scene {e['scene_id']} has shape {frames.shape}")
        lab = labels.get(e["scene_id"], {})
        pool.append(Scene(frames, lab.get("domain_id", -1), lab.get("is_outlier", False), e["scene_id"]))
    return pool


def save_quantized_model(path, qmodel: QuantizedModel, meta: Optional[dict] = None) -> None:
    """Binary sequence of layer records plus a JSON manifest next to it (``<path>.json``)."""
    path = Path(path)
    blob = bytearray(b"QMDL")
    rows = []
    for (i, name) in sorted(qmodel.layers):
        layer = qmodel.layers[(i, name)]
        rec = layer_record_dumps(layer)
        rows.append({"block": i, "name": name, "layer": layer.name, "scheme": layer.scheme.variant.value,
                     "offset": len(blob), "length": len(rec)})
        blob += rec
    path.write_bytes(bytes(blob))
    manifest = {"meta": meta or {}, "model": asdict(qmodel.model.config), "layers": rows}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_quantized_model(path, model: ToyModel) -> QuantizedModel:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != b"QMDL":
        raise FormatError("bad quantized-model magic")
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    layers = {}
    scheme = None
    for row in manifest["layers"]:
        layer, _ = layer_record_loads(blob, row["offset"])
        layers[(row["block"], row["name"])] = layer
        scheme = layer.scheme
    return QuantizedModel(model, scheme, layers)
