"""Self-tuning spectral clustering: scales, affinity, Laplacian, k-means, DBI."""
from __future__ import annotations

import math

import numpy as np
import pytest

from loadinfer.amigen import DataSubset, DailyProfile, PopulationSpec, generate_population, partition_subsets
from loadinfer.spectral import (
    ClusterConfig,
    ClusteringError,
    PatternBank,
    build_affinity,
    build_pattern_bank,
    cluster_once,
    cluster_subset,
    davies_bouldin,
    kmeans,
    local_scales,
    normalized_laplacian,
    select_k,
    spectral_embed,
)


def test_local_scales_line_points():
    pts = np.array([[0.0], [1.0], [10.0]])
    assert np.allclose(local_scales(pts, K=1), [1.0, 1.0, 9.0])


def test_local_scales_needs_enough_points():
    with pytest.raises(ClusteringError):
        local_scales(np.zeros((3, 2)), K=7)


def test_local_scales_identical_points_rejected():
    with pytest.raises(ClusteringError):
        local_scales(np.ones((5, 2)), K=1)


def test_affinity_hand_value():
    pts = np.array([[0.0], [1.0], [10.0]])
    W = build_affinity(pts, local_scales(pts, K=1))
    assert W[0, 1] == pytest.approx(math.exp(-1.0), abs=1e-12)
    assert np.allclose(W, W.T)
    assert np.all(np.diag(W) == 0.0)


def test_normalized_laplacian_two_node_graph():
    W = np.array([[0.0, 1.0], [1.0, 0.0]])
    L = normalized_laplacian(W)
    assert np.allclose(L, W)
    vals = np.linalg.eigvalsh(L)
    assert np.allclose(sorted(vals), [-1.0, 1.0])


def test_normalized_laplacian_rejects_isolated_vertex():
    W = np.zeros((3, 3))
    W[0, 1] = W[1, 0] = 1.0
    with pytest.raises(ClusteringError):
        normalized_laplacian(W)


def test_embedding_rows_unit_norm_and_sign_canonical():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 4))
    W = build_affinity(pts, local_scales(pts, K=5))
    L = normalized_laplacian(W)
    Y1 = spectral_embed(L, 3)
    Y2 = spectral_embed(L.copy(), 3)
    assert np.array_equal(Y1, Y2)
    assert np.allclose(np.linalg.norm(Y1, axis=1), 1.0)


def test_kmeans_two_obvious_clusters():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
    labels, centers = kmeans(pts, 2, seed=0)
    assert labels[0] == labels[1] and labels[2] == labels[3] and labels[0] != labels[2]
    got = sorted(map(tuple, centers))
    assert np.allclose(got, [(0.0, 0.5), (10.0, 10.5)])


def test_kmeans_k1_returns_global_mean():
    pts = np.arange(12, dtype=float).reshape(6, 2)
    labels, centers = kmeans(pts, 1, seed=0)
    assert np.all(labels == 0)
    assert np.allclose(centers[0], pts.mean(axis=0))


def test_kmeans_k_equals_n_zero_inertia():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(7, 3))
    labels, centers = kmeans(pts, 7, seed=0)
    assert len(set(labels.tolist())) == 7
    d2 = np.sum((pts - centers[labels]) ** 2)
    assert d2 == pytest.approx(0.0, abs=1e-24)


def test_kmeans_k_above_n_rejected():
    with pytest.raises(ClusteringError):
        kmeans(np.zeros((3, 2)), 4, seed=0)


def test_dbi_hand_value():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
    labels = np.array([0, 0, 1, 1])
    assert davies_bouldin(pts, labels) == pytest.approx(1.0 / math.sqrt(200.0), abs=1e-12)


def test_dbi_coincident_centroids_is_infinite():
    pts = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [1.0, -1.0]])
    labels = np.array([0, 0, 1, 1])  # both centroids land on (1, 0)
    assert davies_bouldin(pts, labels) == np.inf


def test_dbi_needs_two_clusters():
    with pytest.raises(ClusteringError):
        davies_bouldin(np.zeros((4, 2)), np.zeros(4, dtype=int))


def test_select_k_curve_covers_range():
    rng = np.random.default_rng(2)
    pts = np.vstack([rng.normal(c, 0.05, size=(15, 3)) for c in (0.0, 1.0, 2.0)])
    sel = select_k(pts, range(2, 6), seed=0)
    assert sorted(sel.dbi_curve) == [2, 3, 4, 5]
    assert sel.k == 3
    assert len(sel.labels) == len(pts)


def test_select_k_rejects_bad_range():
    with pytest.raises(ClusteringError):
        select_k(np.zeros((10, 2)), range(2, 2), seed=0)


def test_cluster_once_deterministic():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(25, 5))
    a, _ = cluster_once(pts, 3, seed=9)
    b, _ = cluster_once(pts, 3, seed=9)
    assert np.array_equal(a, b)


def _subset_from(spec_kw: dict, seed: int, kind: str = "weekday") -> DataSubset:
    spec = PopulationSpec(**spec_kw)
    recs = generate_population(spec, seed)
    return partition_subsets(recs)[("residential", kind)], recs


def test_cluster_subset_too_small():
    subset = DataSubset(customer_type="residential", day_kind="weekday")
    subset.profiles = [DailyProfile(np.ones(24), f"c{i}", "weekday") for i in range(3)]
    with pytest.raises(ClusteringError):
        cluster_subset(subset, ClusterConfig())


def test_cluster_subset_recovers_noiseless_planted_shapes():
    subset, recs = _subset_from(
        dict(counts={"residential": 24}, weekday_classes={"residential": 3},
             weekend_classes={"residential": 3}, months=1, noise_sigma=0.0, id_prefix="nl"),
        seed=31,
    )
    sp = cluster_subset(subset, ClusterConfig(k_max=5, seed=0))
    assert sp.chosen_k == 3
    # centroids match the planted shapes after unit-sum normalization
    from loadinfer.amigen import make_class_library
    spec = PopulationSpec(counts={"residential": 24}, weekday_classes={"residential": 3},
                          weekend_classes={"residential": 3}, months=1, noise_sigma=0.0,
                          id_prefix="nl")
    lib = make_class_library(spec, 31)
    planted = [s / s.sum() for s in lib.weekday_shapes["residential"]]
    for cls in sp.classes:
        best = min(np.linalg.norm(cls.centroid - p) / np.linalg.norm(p) for p in planted)
        assert best < 1e-6


def test_bank_reports_more_weekend_patterns():
    spec = PopulationSpec(counts={"residential": 40}, weekday_classes={"residential": 2},
                          weekend_classes={"residential": 4}, months=1, noise_sigma=0.03,
                          id_prefix="wk")
    recs = generate_population(spec, 17)
    bank = build_pattern_bank(partition_subsets(recs), ClusterConfig(k_max=6, seed=0))
    wd = bank.get("residential", "weekday")
    we = bank.get("residential", "weekend")
    assert we.chosen_k > wd.chosen_k


def test_bank_round_trip_is_bit_exact(tmp_path):
    spec = PopulationSpec(counts={"residential": 16}, weekday_classes={"residential": 2},
                          weekend_classes={"residential": 2}, months=1, noise_sigma=0.05,
                          id_prefix="rt")
    recs = generate_population(spec, 6)
    bank = build_pattern_bank(partition_subsets(recs), ClusterConfig(k_max=4, seed=0))
    path = tmp_path / "bank.json"
    bank.save(path)
    back = PatternBank.load(path)
    assert back.to_dict() == bank.to_dict()


def test_build_pattern_bank_skips_empty_subsets():
    spec = PopulationSpec(counts={"residential": 12}, weekday_classes={"residential": 2},
                          weekend_classes={"residential": 2}, months=1, noise_sigma=0.05,
                          id_prefix="sk")
    recs = generate_population(spec, 8)
    bank = build_pattern_bank(partition_subsets(recs), ClusterConfig(k_max=4, seed=0))
    assert set(bank.subsets) == {("residential", "weekday"), ("residential", "weekend")}
