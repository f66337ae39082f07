"""Dimensionality reduction: degenerate cases and a template-purity oracle."""

import numpy as np

from layerlens.reduction import pca, reduce_maps
from layerlens.saliency import FeatureMapSet, normalize_and_threshold, reduce_dims


def nearest_neighbor_purity(points, truth):
    """Fraction of points whose nearest neighbor shares their template."""
    n = len(points)
    dist = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(dist, np.inf)
    hits = sum(truth[i] == truth[int(np.argmin(dist[i]))] for i in range(n))
    return hits / n


def test_single_map_embeds_at_origin():
    out = reduce_maps(np.random.default_rng(0).normal(size=(1, 12)), seed=0)
    assert out.points.shape == (1, 2)
    assert np.all(out.points == 0.0)
    assert out.report.tsne_iterations == 0


def test_identical_maps_collapse():
    row = np.random.default_rng(1).normal(size=10)
    data = np.tile(row, (5, 1))
    out = reduce_maps(data, seed=0)
    dist = ((out.points[:, None] - out.points[None, :]) ** 2).sum(-1)
    assert np.max(dist) < 1e-18


def test_small_sets_skip_tsne_and_pad():
    data = np.random.default_rng(2).normal(size=(5, 30))
    out = reduce_maps(data, seed=0)
    assert out.report.tsne_iterations == 0
    assert out.report.pca_dims == 4
    assert out.points.shape == (5, 2)


def test_pca_dims_capped_at_forty():
    data = np.random.default_rng(3).normal(size=(60, 100))
    out = reduce_maps(data, seed=0)
    assert out.report.pca_dims == 40
    assert out.report.tsne_iterations == 1000


def test_templates_separate_with_purity_oracle():
    rng = np.random.default_rng(4)
    templates = [rng.normal(size=(6, 6)) * 3 for _ in range(3)]
    maps, truth = [], []
    for i in range(20):
        t = i % 3
        maps.append(templates[t] + rng.normal(scale=0.05, size=(6, 6)))
        truth.append(t)
    flat = np.stack([m.reshape(-1) for m in maps])
    out = reduce_maps(flat, seed=11)
    assert out.report.tsne_iterations == 1000
    assert nearest_neighbor_purity(out.points, np.array(truth)) >= 0.9


def test_deterministic_given_seed():
    data = np.random.default_rng(5).normal(size=(10, 16))
    a = reduce_maps(data, seed=9).points
    b = reduce_maps(data, seed=9).points
    assert np.array_equal(a, b)
    c = reduce_maps(data, seed=10).points
    assert not np.array_equal(a, c)


def test_pca_projection_matches_svd_reconstruction():
    rng = np.random.default_rng(6)
    data = rng.normal(size=(8, 5))
    coords = pca(data, 5)
    centered = data - data.mean(axis=0)
    # full-rank projection preserves pairwise distances
    d_orig = ((centered[:, None] - centered[None, :]) ** 2).sum(-1)
    d_proj = ((coords[:, None] - coords[None, :]) ** 2).sum(-1)
    assert np.allclose(d_orig, d_proj, atol=1e-9)


def test_reduce_dims_aligns_points_with_retained_order(rng):
    maps = rng.normal(size=(9, 4, 4))
    weights = rng.uniform(0.1, 1.0, size=9)
    fset = FeatureMapSet("l", maps, weights)
    retained = normalize_and_threshold(fset, 0.0)
    out = reduce_dims(retained, seed=2)
    assert out.points.shape == (len(retained.indices), 2)
    assert np.all(np.isfinite(out.points))
