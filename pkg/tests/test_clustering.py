from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forensic_fusion.clustering import (
    ClusteringError,
    ClusteringProfile,
    ClusterModel,
    ValBundle,
    assign_cluster,
    build_clustering_profile,
    cluster_reliability,
    davies_bouldin,
    kmeans_fit,
    select_k,
    silhouette_score,
)
from forensic_fusion.core import FeatureVector
from oracles import best_partition_1d, davies_bouldin_direct, silhouette_direct

LINE = np.array([[0.0], [1.0], [10.0], [11.0]])
LINE_LABELS = [0, 0, 1, 1]


def _raw_centroids(model: ClusterModel) -> np.ndarray:
    return model.centroids * model.scale + model.mean


def test_silhouette_fixture():
    assert silhouette_score(LINE, LINE_LABELS) == pytest.approx(0.89975, abs=1e-5)
    assert silhouette_score(LINE, LINE_LABELS) == pytest.approx(silhouette_direct(LINE, LINE_LABELS), abs=1e-12)


def test_silhouette_overlapping_clusters_non_positive():
    x = np.array([[0.0], [1.0], [0.0], [1.0]])
    assert silhouette_score(x, [0, 0, 1, 1]) <= 0.0


def test_silhouette_singleton_contributes_zero():
    x = np.array([[0.0], [1.0], [50.0]])
    per_point_sum = silhouette_score(x, [0, 0, 1]) * 3
    two_point = silhouette_direct(x, [0, 0, 1]) * 3
    assert per_point_sum == pytest.approx(two_point)
    # the two-member cluster's points give (b - a) / b each; the singleton adds nothing
    assert per_point_sum == pytest.approx((50 - 1) / 50 + (49 - 1) / 49)


def test_silhouette_single_cluster_raises():
    with pytest.raises(ClusteringError):
        silhouette_score(LINE, [0, 0, 0, 0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_silhouette_and_db_match_direct_formulas(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 2))
    labels = np.arange(12) % k
    rng.shuffle(labels)
    assert silhouette_score(x, labels) == pytest.approx(silhouette_direct(x, labels.tolist()), abs=1e-9)
    assert davies_bouldin(x, labels) == pytest.approx(davies_bouldin_direct(x, labels.tolist()), abs=1e-9)


def test_davies_bouldin_fixture():
    assert davies_bouldin(LINE, LINE_LABELS) == pytest.approx(0.1, abs=1e-9)


def test_davies_bouldin_tighter_is_smaller_and_scale_free():
    tight = np.array([[0.0], [0.5], [10.0], [10.5]])
    assert davies_bouldin(tight, LINE_LABELS) < davies_bouldin(LINE, LINE_LABELS)
    assert davies_bouldin(LINE * 7.3, LINE_LABELS) == pytest.approx(davies_bouldin(LINE, LINE_LABELS), abs=1e-12)


def test_davies_bouldin_coincident_centroids_raise():
    x = np.array([[0.0], [2.0], [1.0], [1.0]])
    with pytest.raises(ClusteringError):
        davies_bouldin(x, [0, 0, 1, 1])


def test_select_k_elbow():
    assert select_k(list(zip(range(1, 6), [100, 40, 20, 15, 12]))) == 2


def test_select_k_linear_tie_takes_smallest_interior():
    assert select_k([(k, 100.0 - 10 * k) for k in range(2, 8)]) == 3


def test_select_k_needs_three_points():
    with pytest.raises(ClusteringError):
        select_k([(1, 5.0), (2, 1.0)])


@pytest.mark.parametrize("seed", [0, 1, 42, 999])
def test_kmeans_line_matches_exhaustive_partition(seed):
    model = kmeans_fit(LINE, 2, seed=seed, standardize=False)
    inertia, cents = best_partition_1d(LINE[:, 0], 2)
    assert sorted(_raw_centroids(model)[:, 0]) == pytest.approx([0.5, 10.5])
    assert sorted(_raw_centroids(model)[:, 0]) == pytest.approx(cents)
    assert model.inertia == pytest.approx(inertia)


def test_kmeans_k_equal_distinct_points_has_zero_inertia():
    assert kmeans_fit(LINE, 4, seed=3).inertia == pytest.approx(0.0, abs=1e-12)


def test_kmeans_too_few_distinct_points():
    with pytest.raises(ClusteringError):
        kmeans_fit(np.array([[1.0], [1.0], [2.0]]), 3)


def test_kmeans_deterministic_bitwise():
    x = np.random.default_rng(4).normal(size=(200, 5))
    a, b = kmeans_fit(x, 5, seed=42), kmeans_fit(x, 5, seed=42)
    assert a.centroids.tobytes() == b.centroids.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kmeans_inertia_non_increasing(seed, k):
    x = np.random.default_rng(seed).normal(size=(60, 3))
    hist = kmeans_fit(x, k, seed=seed).inertia_history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_kmeans_small_instances_reach_fixed_point_above_optimum(seed):
    # Lloyd converges to a local optimum, so only the exhaustive bound and fixed-point conditions are guaranteed
    pts = np.random.default_rng(seed).uniform(0, 20, size=7)
    model = kmeans_fit(pts[:, None], 2, seed=seed, n_init=8, standardize=False)
    assert model.inertia >= best_partition_1d(pts, 2)[0] - 1e-9
    cents = _raw_centroids(model)[:, 0]
    labels = np.argmin(np.abs(pts[:, None] - cents[None, :]), axis=1)
    assert labels.tolist() == model.labels.tolist()
    for c in range(2):
        assert cents[c] == pytest.approx(pts[labels == c].mean(), abs=1e-9)


def test_assign_cluster_identity_tie_and_dim():
    model = ClusterModel("clip", 4, np.array([[0.0], [1.0], [5.0], [3.0]]), 0, np.zeros(1), np.ones(1))
    assert assign_cluster(model, [5.0]) == 2
    assert assign_cluster(model, [2.0]) == 1
    with pytest.raises(ClusteringError):
        assign_cluster(model, [1.0, 2.0])


def test_model_round_trip():
    model = kmeans_fit(np.random.default_rng(0).normal(size=(40, 3)), 3, seed=1)
    assert ClusterModel.from_dict(model.to_dict()) == model


def _two_cluster_model() -> ClusterModel:
    return ClusterModel("clip", 2, np.array([[0.0], [10.0]]), 0, np.zeros(1), np.ones(1))


def test_reliability_perfect_expert_ranks_first_everywhere():
    model = _two_cluster_model()
    val = [
        (FeatureVector("clip", [0.1], dims={"clip": 1}), 1, {"A": 0.9, "B": 0.2}),
        (FeatureVector("clip", [0.2], dims={"clip": 1}), 0, {"A": 0.1, "B": 0.8}),
        (FeatureVector("clip", [9.9], dims={"clip": 1}), 1, {"A": 0.7, "B": 0.6}),
        (FeatureVector("clip", [9.8], dims={"clip": 1}), 0, {"A": 0.3, "B": 0.9}),
    ]
    for rel in cluster_reliability(model, val):
        assert rel.ranking[0] == "A"
        assert (rel.phi["A"].f1, rel.phi["A"].acc) == (1.0, 1.0)


def test_reliability_rankings_swap_between_clusters():
    model = _two_cluster_model()
    bundle = ValBundle(
        np.array([[0.0], [0.5], [10.0], [9.5]]),
        np.array([1, 0, 1, 0]),
        {"A": np.array([0.9, 0.1, 0.2, 0.8]), "B": np.array([0.2, 0.8, 0.9, 0.1])},
    )
    r0, r1 = cluster_reliability(model, bundle)
    assert r0.ranking == ("A", "B") and r1.ranking == ("B", "A")
    assert r0.phi["A"].f1 == 1.0 and r0.phi["B"].f1 == 0.0


def test_reliability_empty_cluster_is_unusable():
    model = _two_cluster_model()
    bundle = ValBundle(np.array([[0.0], [0.5]]), np.array([1, 0]), {"A": np.array([0.9, 0.1])})
    r0, r1 = cluster_reliability(model, bundle)
    assert r0.usable and not r1.usable and r1.ranking == ()


def _blob_data(seed: int = 0, n: int = 400):
    rng = np.random.default_rng(seed)
    regime = rng.integers(0, 2, n)
    x = rng.normal(size=(n, 4)) + 8.0 * regime[:, None]
    gt = rng.integers(0, 2, n)
    good = np.where(gt == 1, 0.9, 0.1)
    bad = 1 - good
    scores = {"A": np.where(regime == 0, good, bad), "B": np.where(regime == 1, good, bad)}
    return x, gt, scores, regime


def test_build_profile_auto_k_and_rankings():
    x, gt, scores, _ = _blob_data()
    bundle = ValBundle(x[200:], gt[200:], {e: s[200:] for e, s in scores.items()})
    prof = build_clustering_profile("clip", x[:200], bundle, k="auto", seed=42)
    assert prof.model.k == 2
    assert prof.quality.silhouette > 0.5
    tops = {r.ranking[0] for r in prof.reliabilities}
    assert tops == {"A", "B"}
    assert ClusteringProfile.from_dict(prof.to_dict()) == prof


def test_profile_without_expert_leaves_singleton_rankings():
    x, gt, scores, _ = _blob_data(1)
    bundle = ValBundle(x[200:], gt[200:], {e: s[200:] for e, s in scores.items()})
    prof = build_clustering_profile("srm", x[:200], bundle, k=2)
    for r in prof.without_expert("B").reliabilities:
        assert r.ranking == ("A",)
    assert prof.restricted_to(["B"]).expert_ids == ("B",)


def test_profile_rejects_train_val_overlap():
    x, gt, scores, _ = _blob_data(2, 40)
    bundle = ValBundle(x, gt, scores, ids=[f"s{i}" for i in range(40)])
    with pytest.raises(ValueError):
        build_clustering_profile("cfa", x, bundle, k=2, train_ids=["s3"])
