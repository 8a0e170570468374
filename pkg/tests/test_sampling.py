import itertools
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score

from quantsmooth.errors import DegeneratePoolError, DimensionError, FormatError, NumericError
from quantsmooth.model import N_SPECIAL, ToyModelConfig, build_model, gen_pool
from quantsmooth.sampling import (
    LayerStatRecord,
    Selection,
    cluster_quotas,
    collect_layer_stats,
    collect_pool_features,
    deep_layers,
    diverse_sample,
    entropy,
    filter_pool,
    frame_corr_vector,
    kmeans,
    max_entropy_oracle,
    noise_scores,
    read_calibset,
    read_scores,
    select_nfds,
    select_random,
    stats_record,
    write_calibset,
    write_scores,
)
from quantsmooth.tensor import make_rng

from pins import PINS


def rec(i, means, variances=None):
    means = np.atleast_1d(np.asarray(means, dtype=float))
    variances = np.ones_like(means) if variances is None else np.atleast_1d(np.asarray(variances, dtype=float))
    return LayerStatRecord(i, tuple(range(len(means))), means, variances)


# -- statistics and scores --------------------------------------------------


def test_stats_record_against_statistics_module():
    rng = make_rng(21)
    acts = [[rng.standard_normal((5, 3)) * (k + 1) + k for k in range(2)] for _ in range(3)]
    for i, a in enumerate(acts):
        r = stats_record(i, a, (6, 7))
        for j, layer in enumerate(a):
            flat = layer.ravel().tolist()
            assert abs(r.means[j] - statistics.fmean(flat)) < 1e-12
            assert abs(r.variances[j] - statistics.pvariance(flat)) < 1e-12
    const = stats_record(0, [np.full((4, 4), 3.0)], (0,))
    assert const.variances[0] == 0.0


def test_noise_score_hand_fixture():
    scores = noise_scores([rec(0, 1.0), rec(1, 1.1), rec(2, 5.0)])
    assert np.allclose(scores, [0.734, 0.680, 1.414], atol=1e-3)
    # hand z-scores: population sigma over the three means
    mu = (1.0 + 1.1 + 5.0) / 3
    sigma = math.sqrt(sum((m - mu) ** 2 for m in (1.0, 1.1, 5.0)) / 3 + 1e-6)
    assert sigma == pytest.approx(1.8625, abs=1e-4)
    assert scores[2] == pytest.approx(abs(5.0 - mu) / sigma, abs=1e-12)


def test_noise_score_trivial_cases():
    assert np.array_equal(noise_scores([rec(i, [2.0, 3.0]) for i in range(4)]), np.zeros(4))
    with pytest.raises(DegeneratePoolError):
        noise_scores([rec(0, 1.0)])


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=10), st.floats(-50, 50), st.randoms())
@settings(max_examples=50)
def test_noise_scores_shift_and_order_invariant(means, shift, rnd):
    recs = [rec(i, m, abs(m) + 1) for i, m in enumerate(means)]
    base = noise_scores(recs)
    shifted = noise_scores([rec(r.sample_id, r.means + shift, r.variances) for r in recs])
    assert np.allclose(base, shifted, atol=1e-6)
    perm = list(range(len(recs)))
    rnd.shuffle(perm)
    assert np.allclose(noise_scores([recs[p] for p in perm]), base[perm], atol=1e-12)


def test_deep_layers():
    assert deep_layers(8, 0.5) == (4, 5, 6, 7)
    assert deep_layers(8, 1.0) == tuple(range(8))
    assert deep_layers(5, 0.5) == (2, 3, 4)
    with pytest.raises(ValueError):
        deep_layers(8, 0.0)


# -- filtering --------------------------------------------------------------


def test_filter_pool_examples():
    items = list("abcde")
    assert filter_pool(items, [5, 1, 3, 2, 4], 1.0) == items
    assert filter_pool(items, [5, 1, 3, 2, 4], 0.4) == ["b", "d"]
    assert filter_pool(items, [1, 1, 1, 0, 1], 0.4, ids=[9, 8, 7, 6, 5]) == ["e", "d"]  # id order
    assert filter_pool(items, [5, 1, 3, 2, 4], 0.2, mode="drop-highest") == ["b", "c", "d", "e"]
    assert len(filter_pool(list(range(400)), make_rng(0).random(400), 0.2)) == 80
    with pytest.raises(ValueError):
        filter_pool(items, [1] * 5, 0.0)
    with pytest.raises(DimensionError):
        filter_pool(items, [1] * 4, 0.5)
    with pytest.raises(ValueError):
        filter_pool(items, [1] * 5, 0.5, mode="middle")


@given(st.lists(st.floats(0, 10), min_size=1, max_size=40), st.floats(0.01, 1.0))
def test_filter_pool_cardinality(scores, keep):
    out = filter_pool(list(range(len(scores))), scores, keep)
    assert len(out) == max(1, math.ceil(keep * len(scores) - 1e-9))
    assert set(out) <= set(range(len(scores)))
    worst_kept = max(scores[i] for i in out)
    assert all(scores[i] >= worst_kept for i in set(range(len(scores))) - set(out))


# -- frame correlation ------------------------------------------------------


def test_frame_corr_examples():
    s, f, d = 2, 3, 4
    per = s + N_SPECIAL
    frame = make_rng(1).standard_normal((per, d))
    assert np.allclose(frame_corr_vector(np.tile(frame, (f, 1)), s, f), [1, 1])
    a = np.concatenate([frame, -frame, frame])
    assert np.allclose(frame_corr_vector(a, s, f), [-1, 1])
    e = np.zeros((per, d))
    e[0, 0] = 1.0
    o = np.zeros((per, d))
    o[0, 1] = 1.0
    assert np.allclose(frame_corr_vector(np.concatenate([e, o, e]), s, f), [0, 1])
    with pytest.raises(NumericError):
        frame_corr_vector(np.concatenate([e, np.zeros((per, d)), e]), s, f)
    with pytest.raises(DimensionError):
        frame_corr_vector(np.ones((5, d)), s, f)


def test_frame_corr_special_rows_flag():
    s, f, d = 2, 2, 3
    per = s + N_SPECIAL
    a = make_rng(2).standard_normal((per * f, d))
    flat = a[:s].ravel(), a[per:per + s].ravel()
    want = np.dot(*flat) / np.linalg.norm(flat[0]) / np.linalg.norm(flat[1])
    assert frame_corr_vector(a, s, f, include_special=False)[0] == pytest.approx(want, abs=1e-12)


@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_frame_corr_scale_invariant(c, seed):
    a = make_rng(seed).standard_normal((3 * (4 + N_SPECIAL), 5))
    assert np.allclose(frame_corr_vector(c * a, 4, 3), frame_corr_vector(a, 4, 3), atol=1e-12)


# -- clustering -------------------------------------------------------------


def brute_force_partition(x, k):
    """Minimum-SSE labelling over every assignment of points to k clusters."""
    best, best_labels = np.inf, None
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels.tolist())) < k:
            continue
        sse = sum(np.sum((x[labels == j] - x[labels == j].mean(axis=0)) ** 2) for j in range(k))
        if sse < best - 1e-12:
            best, best_labels = sse, labels
    return best, best_labels


def same_partition(a, b):
    return adjusted_rand_score(a, b) == 1.0


def test_kmeans_matches_brute_force():
    pts = np.array([[0, 0], [0, 1], [10, 10], [10, 11]], dtype=float)
    cm = kmeans(pts, 2, seed=0)
    assert same_partition(cm.labels, [0, 0, 1, 1])
    for seed in range(8):
        x = make_rng(seed, 30).standard_normal((7, 2)) + np.repeat([[0, 0], [4, 4], [0, 6]], [3, 2, 2], axis=0)
        best, labels = brute_force_partition(x, 3)
        cm = kmeans(x, 3, seed=seed)
        if cm.sse <= best * (1 + 1e-9):
            assert same_partition(cm.labels, labels)
        # Lloyd can stop in a local optimum, never below the global one
        assert cm.sse >= best * (1 - 1e-9)


def test_kmeans_trivial_cases():
    x = make_rng(0).standard_normal((5, 3))
    cm = kmeans(x, 5, seed=1)
    assert cm.sse == 0.0 and sorted(cm.labels.tolist()) == [0, 1, 2, 3, 4]
    a, b = kmeans(x, 2, seed=7), kmeans(x, 2, seed=7)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.centroids, b.centroids)
    with pytest.raises(DegeneratePoolError):
        kmeans(x, 6, seed=0)


@given(st.integers(0, 10**6), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_kmeans_monotone_and_nonempty(seed, k):
    x = make_rng(seed).standard_normal((30, 3))
    x[:10] = 0.0  # duplicates provoke empty clusters
    cm = kmeans(x, k, seed)
    assert all(b <= a * (1 + 1e-12) + 1e-15 for a, b in zip(cm.sse_history, cm.sse_history[1:]))
    assert set(cm.labels.tolist()) == set(range(k))
    assert cm.n_iter <= 100


def test_kmeans_recovers_domains_on_default_pool():
    cfg = ToyModelConfig()
    pool = [sc for sc in gen_pool(4, 40, 0.05, seed=0, config=cfg) if not sc.is_outlier]
    feats = collect_pool_features(build_model(cfg), pool)
    corr = np.array([frame_corr_vector(a, cfg.s, cfg.f) for a in feats.final])
    cm = kmeans(corr, 4, seed=0)
    ari = adjusted_rand_score([sc.domain_id for sc in pool], cm.labels)
    assert ari >= PINS["domain_ari_floor"]


# -- quotas and sampling ----------------------------------------------------


def test_quota_examples():
    assert cluster_quotas([10, 10, 10, 10], 8).tolist() == [2, 2, 2, 2]
    assert cluster_quotas([80], 40).tolist() == [40]
    q = cluster_quotas([5, 3, 2], 5)
    # 2.5, 1.5, 1.0 round half up to 3, 2, 1; the surplus comes off the largest cluster
    assert q.tolist() == [2, 2, 1]
    with pytest.raises(ValueError):
        cluster_quotas([3, 3], 0)
    with pytest.raises(ValueError):
        cluster_quotas([3, 3], 7)


@given(st.lists(st.integers(1, 30), min_size=1, max_size=8), st.data())
def test_quotas_sum_and_bounds(sizes, data):
    budget = data.draw(st.integers(1, sum(sizes)))
    q = cluster_quotas(sizes, budget)
    assert q.sum() == budget
    assert np.all(q >= 0) and np.all(q <= np.asarray(sizes))


@given(st.lists(st.integers(0, 4), min_size=5, max_size=50), st.integers(0, 1000), st.data())
def test_diverse_sample_unique_and_sized(labels, seed, data):
    budget = data.draw(st.integers(1, len(labels)))
    ids = [100 + 3 * i for i in range(len(labels))]
    got = diverse_sample(labels, budget, seed, ids)
    assert len(got) == budget == len(set(got))
    assert set(got) <= set(ids)
    assert got == diverse_sample(labels, budget, seed, ids)


def test_single_cluster_is_uniform():
    counts = np.zeros(10)
    for seed in range(400):
        counts[diverse_sample([0] * 10, 2, seed)] += 1
    assert counts.min() > 50 and counts.max() < 110


# -- entropy ----------------------------------------------------------------


def test_entropy_values():
    assert entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)
    assert entropy([1.0, 0, 0, 0]) == 0.0
    direct = -(0.7 * math.log(0.7) + 3 * 0.1 * math.log(0.1))
    assert entropy([0.7, 0.1, 0.1, 0.1]) == pytest.approx(direct, abs=1e-12)
    assert entropy([0.7, 0.1, 0.1, 0.1]) == pytest.approx(0.940449, abs=2e-6)
    with pytest.raises(ValueError):
        entropy([0.5, 0.6])
    with pytest.raises(ValueError):
        entropy([1.5, -0.5])


def test_max_entropy_oracle_small():
    assert np.allclose(max_entropy_oracle(2, 0.1), [0.5, 0.5])
    assert np.allclose(max_entropy_oracle(4, 0.05), [0.25] * 4)


# -- end to end and files ---------------------------------------------------


def test_select_nfds_shapes_and_arms():
    rng = make_rng(3)
    ids = list(range(50, 150))
    scores = rng.random(100)
    corr = rng.standard_normal((100, 3))
    sel = select_nfds(ids, scores, corr, keep=0.5, k=4, budget=20, seed=1)
    assert len(sel.selected) == 20 and len(sel.kept) == 50
    assert set(sel.selected) <= set(sel.kept) and set(sel.assignments) == set(sel.kept)
    plain = select_nfds(ids, scores, corr, keep=0.5, budget=20, seed=1, use_filter=False, use_cluster=False)
    assert len(plain.kept) == 100 and set(plain.assignments.values()) == {0}
    with pytest.raises(ValueError):
        select_nfds(ids, scores, corr, keep=0.1, budget=20)
    r = select_random(ids, 10, 4)
    assert r == sorted(r) and len(set(r)) == 10 and r == select_random(ids, 10, 4)


def test_score_and_calibset_files(tmp_path):
    cfg = ToyModelConfig(d=32, s=8, n_blocks=2)
    pool = gen_pool(2, 4, 0.0, seed=2, config=cfg)
    model = build_model(cfg)
    recs = collect_layer_stats(model, pool)
    assert [r.layers for r in recs] == [(1,)] * 8
    scores = noise_scores(recs)
    corr = np.ones((8, 3))
    write_scores(tmp_path / "s.json", recs[::-1], scores[::-1], corr, {"seed": 2})
    back, sc, cv = read_scores(tmp_path / "s.json")
    assert [r.sample_id for r in back] == sorted(r.sample_id for r in recs)
    assert np.array_equal(sc, scores)
    sel = Selection([3, 1], [1, 3, 5], {1: 0, 3: 1, 5: 0}, 0, 0.2, 2, 2)
    write_calibset(tmp_path / "c.json", sel)
    assert read_calibset(tmp_path / "c.json") == [1, 3]
    (tmp_path / "bad.json").write_text('{"samples": [{"sample_id": 1}]}')
    with pytest.raises(FormatError):
        read_scores(tmp_path / "bad.json")
    (tmp_path / "bad2.json").write_text("{}")
    with pytest.raises(FormatError):
        read_calibset(tmp_path / "bad2.json")
