"""Noise-filtered diverse sampling of calibration scenes.

Pipeline: deep-layer mean/variance per candidate -> z-score noise score ->
keep the lowest-scoring fraction -> frame-correlation vector per survivor ->
k-means on those vectors -> per-cluster quotas proportional to cluster size,
uniform sampling inside each cluster.

Nothing here reads generator labels; scenes are only ever forwarded through
the model and identified by ``scene_id``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegeneratePoolError, DimensionError, FormatError, NumericError
from .model import N_SPECIAL, ToyModel, forward
from .tensor import make_rng

EPSILON = 1e-6
FILTER_MODES = ("keep-lowest", "drop-highest")


@dataclass(frozen=True)
class LayerStatRecord:
    sample_id: int
    layers: tuple
    means: np.ndarray = field(repr=False)
    variances: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class ScoreStats:
    mu: np.ndarray
    sigma: np.ndarray
    nu: np.ndarray
    tau: np.ndarray
    epsilon: float = EPSILON


def deep_layers(n_blocks: int, layer_fraction: float) -> tuple:
    if not 0.0 < layer_fraction <= 1.0:
        raise ValueError("layer_fraction must lie in (0, 1]")
    n = math.ceil(layer_fraction * n_blocks - 1e-12)
    return tuple(range(n_blocks - n, n_blocks))


def stats_record(sample_id: int, activations: Sequence[np.ndarray], layers: Sequence[int]) -> LayerStatRecord:
    """Mean and population variance over all entries of each layer's activation."""
    means = np.array([np.mean(a) for a in activations])
    variances = np.array([np.var(a) for a in activations])
    return LayerStatRecord(int(sample_id), tuple(layers), means, variances)


@dataclass
class PoolFeatures:
    records: list
    final: np.ndarray  # B x n x d final-block output, in pool order


def collect_pool_features(model: ToyModel, pool: Sequence, layer_fraction: float = 0.5, chunk: int = 50) -> PoolFeatures:
    """One forward pass per scene giving both deep-layer statistics and final features."""
    if len(pool) == 0:
        raise DegeneratePoolError("empty pool")
    layers = deep_layers(model.config.n_blocks, layer_fraction)
    records, finals = [], []
    for start in range(0, len(pool), chunk):
        part = list(pool[start:start + chunk])
        res = forward(model, part)
        for b, sc in enumerate(part):
            records.append(stats_record(sc.scene_id, [res.block_inputs[j][b] for j in layers], layers))
        finals.append(res.final)
    return PoolFeatures(records, np.concatenate(finals))


def collect_layer_stats(model: ToyModel, pool: Sequence, layer_fraction: float = 0.5) -> list:
    return collect_pool_features(model, pool, layer_fraction).records


def score_stats(records: Sequence[LayerStatRecord], epsilon: float = EPSILON) -> ScoreStats:
    if len(records) < 2:
        raise DegeneratePoolError("noise scores need at least two samples")
    m = np.stack([r.means for r in records])
    s = np.stack([r.variances for r in records])
    mu, nu = m.mean(axis=0), s.mean(axis=0)
    sigma = np.sqrt(np.mean((m - mu) ** 2, axis=0) + epsilon)
    tau = np.sqrt(np.mean((s - nu) ** 2, axis=0) + epsilon)
    return ScoreStats(mu, sigma, nu, tau, epsilon)


def noise_scores(records: Sequence[LayerStatRecord], epsilon: float = EPSILON) -> np.ndarray:
    """Root of summed squared z-scores of per-layer means and variances (pool-level moments)."""
    st = score_stats(records, epsilon)
    m = np.stack([r.means for r in records])
    s = np.stack([r.variances for r in records])
    z = np.sum(((m - st.mu) / st.sigma) ** 2, axis=1) + np.sum(((s - st.nu) / st.tau) ** 2, axis=1)
    return np.sqrt(z)


def filter_pool(items: Sequence, scores, keep: float = 0.2, ids: Optional[Sequence[int]] = None,
                mode: str = "keep-lowest") -> list:
    """Lowest-score subset of ``items``, ties broken by id ascending.

    ``keep-lowest`` keeps ``ceil(keep * n)`` items; ``drop-highest`` reads
    ``keep`` as the fraction to discard and keeps ``ceil((1 - keep) * n)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(items)
    if scores.shape != (n,):
        raise DimensionError("one score per item expected")
    if not 0.0 < keep <= 1.0:
        raise ValueError("keep must lie in (0, 1]")
    if mode not in FILTER_MODES:
        raise ValueError(f"mode must be one of {FILTER_MODES}")
    ids = list(range(n)) if ids is None else list(ids)
    frac = keep if mode == "keep-lowest" else 1.0 - keep
    n_keep = max(1, math.ceil(frac * n - 1e-9))
    order = sorted(range(n), key=lambda i: (scores[i], ids[i]))[:n_keep]
    return [items[i] for i in sorted(order, key=lambda i: ids[i])]


def frame_corr_vector(a, s: int, f: int, include_special: bool = True) -> np.ndarray:
    """Cosine similarity of each later frame's flattened features with frame 0."""
    a = np.asarray(a, dtype=np.float64)
    per = s + N_SPECIAL
    if a.ndim != 2 or a.shape[0] != per * f:
        raise DimensionError(f"expected ({per * f}, d) features, got {a.shape}")
    frames = a.reshape(f, per, -1)
    if not include_special:
        frames = frames[:, :s]
    flat = frames.reshape(f, -1)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0):
        raise NumericError("zero-norm frame")
    return np.clip(flat[1:] @ flat[0] / (norms[1:] * norms[0]), -1.0, 1.0)


# -- clustering ------------------------------------------------------------


@dataclass
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    seed: int
    sse_history: list
    n_iter: int

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def sse(self) -> float:
        return self.sse_history[-1]


def _sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.sum((x[:, None, :] - c[None, :, :]) ** 2, axis=2)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(vectors, k: int, seed: int, max_iter: int = 100, tol: float = 1e-6) -> ClusterModel:
    """Seeded k-means++ followed by Lloyd iterations.

    Stops when no centroid moves more than ``tol`` or after ``max_iter``
    rounds. An empty cluster is re-seeded at the point farthest from its
    current centroid. The SSE is checked to be non-increasing every round.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if k < 1 or n < k:
        raise DegeneratePoolError(f"need at least k={k} vectors, got {n}")
    rng = make_rng(seed, 3)
    c = _kmeanspp(x, k, rng)
    history = []
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dist(x, c)
        labels = np.argmin(d2, axis=1)
        for j in range(k):
            if not np.any(labels == j):
                far = int(np.argmax(d2[np.arange(n), labels]))
                labels[far] = j
                d2[far, j] = 0.0
        new_c = np.array([x[labels == j].mean(axis=0) for j in range(k)])
        sse = float(np.sum((x - new_c[labels]) ** 2))
        if history and sse > history[-1] * (1 + 1e-12) + 1e-15:
            raise NumericError(f"k-means SSE increased: {history[-1]} -> {sse}")
        history.append(sse)
        shift = float(np.max(np.linalg.norm(new_c - c, axis=1)))
        c = new_c
        if shift < tol:
            break
    return ClusterModel(c, labels, seed, history, it)


def cluster_quotas(sizes: Sequence[int], budget: int) -> np.ndarray:
    """Quota per cluster: ``round(budget * size / total)``, then the surplus or
    deficit is settled on the largest clusters first, never exceeding a size."""
    sizes = np.asarray(sizes, dtype=np.int64)
    total = int(sizes.sum())
    if budget <= 0:
        raise ValueError("budget must be positive")
    if budget > total:
        raise ValueError(f"budget {budget} exceeds the {total} available samples")
    q = np.minimum(np.floor(budget * sizes / total + 0.5).astype(np.int64), sizes)
    order = sorted(range(len(sizes)), key=lambda j: (-sizes[j], j))
    while q.sum() != budget:
        step = 1 if q.sum() < budget else -1
        for j in order:
            if q.sum() == budget:
                break
            if 0 <= q[j] + step <= sizes[j]:
                q[j] += step
    return q


def diverse_sample(labels, budget: int, seed: int, ids: Optional[Sequence[int]] = None) -> list:
    """Uniform sampling without replacement inside each cluster, proportional quotas."""
    labels = np.asarray(labels)
    ids = list(range(len(labels))) if ids is None else list(ids)
    clusters = sorted(set(labels.tolist()))
    members = [[ids[i] for i in np.flatnonzero(labels == c)] for c in clusters]
    quotas = cluster_quotas([len(m) for m in members], budget)
    rng = make_rng(seed, 4)
    chosen = []
    for mem, q in zip(members, quotas):
        if q:
            chosen.extend(rng.choice(np.array(mem), size=int(q), replace=False).tolist())
    return sorted(int(i) for i in chosen)


# -- entropy ---------------------------------------------------------------


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("p must be a probability vector")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def _simplex_grid(n: int, steps: int) -> np.ndarray:
    """All compositions of ``steps`` into ``n`` non-negative parts (as counts)."""
    rows = []
    for head in itertools.product(range(steps + 1), repeat=n - 1):
        rest = steps - sum(head)
        if rest >= 0:
            rows.append(head + (rest,))
    return np.array(rows, dtype=np.float64)


def max_entropy_oracle(n: int, grid_step: float = 0.01) -> np.ndarray:
    """Brute-force argmax of entropy over a grid on the probability simplex."""
    if n < 1:
        raise ValueError("n must be positive")
    steps = int(round(1.0 / grid_step))
    p = _simplex_grid(n, steps) / steps
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
    return p[int(np.argmax(h))]


# -- end-to-end selection --------------------------------------------------


@dataclass
class Selection:
    selected: list
    kept: list
    assignments: dict  # scene_id -> cluster, kept scenes only
    seed: int
    keep: float
    k: int
    budget: int


def select_nfds(ids: Sequence[int], scores, corr_vectors, keep: float = 0.2, k: int = 8, budget: int = 40,
                seed: int = 0, filter_mode: str = "keep-lowest", use_filter: bool = True,
                use_cluster: bool = True) -> Selection:
    """Filter by noise score, cluster frame-correlation vectors, sample proportionally.

    ``use_filter=False`` / ``use_cluster=False`` give the ablation arms
    (clustered-only, filtered-only, or plain random when both are off).
    """
    ids = [int(i) for i in ids]
    corr = np.asarray(corr_vectors, dtype=np.float64)
    index = {sid: j for j, sid in enumerate(ids)}
    kept = filter_pool(ids, scores, keep, ids, filter_mode) if use_filter else sorted(ids)
    if budget > len(kept):
        raise ValueError(f"budget {budget} exceeds the {len(kept)} filtered samples")
    if use_cluster:
        cm = kmeans(corr[[index[i] for i in kept]], min(k, len(kept)), seed)
        labels = cm.labels
    else:
        labels = np.zeros(len(kept), dtype=np.int64)
    selected = diverse_sample(labels, budget, seed, kept)
    return Selection(selected, kept, {sid: int(c) for sid, c in zip(kept, labels)}, seed, keep, k, budget)


def select_random(ids: Sequence[int], budget: int, seed: int) -> list:
    rng = make_rng(seed, 5)
    return sorted(int(i) for i in rng.choice(np.array(list(ids)), size=budget, replace=False))


# -- files -----------------------------------------------------------------


def write_scores(path, records: Sequence[LayerStatRecord], scores, corr_vectors, meta: Optional[dict] = None) -> None:
    rows = []
    for r, sc, c in sorted(zip(records, scores, corr_vectors), key=lambda t: t[0].sample_id):
        rows.append({
            "sample_id": r.sample_id,
            "layers": list(r.layers),
            "m": [float(v) for v in r.means],
            "s": [float(v) for v in r.variances],
            "score": float(sc),
            "frame_corr": [float(v) for v in c],
        })
    Path(path).write_text(json.dumps({"meta": meta or {}, "samples": rows}, indent=1, sort_keys=True))


def read_scores(path):
    """Returns ``(records, scores, corr_vectors)`` sorted by sample id."""
    doc = json.loads(Path(path).read_text())
    try:
        rows = sorted(doc["samples"], key=lambda r: r["sample_id"])
        records = [LayerStatRecord(r["sample_id"], tuple(r["layers"]), np.array(r["m"]), np.array(r["s"])) for r in rows]
        scores = np.array([r["score"] for r in rows])
        corr = np.array([r["frame_corr"] for r in rows])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed scores file: {exc}") from exc
    return records, scores, corr


def write_calibset(path, sel: Selection, meta: Optional[dict] = None) -> None:
    doc = {
        "meta": meta or {},
        "seed": sel.seed,
        "T": sel.keep,
        "K": sel.k,
        "budget": sel.budget,
        "selected": sorted(sel.selected),
        "assignments": [{"sample_id": sid, "cluster": c} for sid, c in sorted(sel.assignments.items())],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_calibset(path) -> list:
    doc = json.loads(Path(path).read_text())
    if "selected" not in doc:
        raise FormatError("calibration set file has no 'selected' list")
    return [int(i) for i in doc["selected"]]
