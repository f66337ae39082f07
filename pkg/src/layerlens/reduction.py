"""PCA followed by exact t-SNE for embedding retained feature maps in 2-D.

The t-SNE here is the exact (all-pairs) variant with the classic momentum
and per-parameter gain schedule: 1000 iterations, learning rate 200, early
exaggeration x12 for the first 250 iterations, seeded Gaussian init with
sigma 1e-4. Point counts in this pipeline are tiny (tens of maps), so the
quadratic cost is irrelevant and determinism is what matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from layerlens.errors import ValidationError

TSNE_ITERATIONS = 1000
TSNE_LEARNING_RATE = 200.0
TSNE_EARLY_EXAGGERATION = 12.0
TSNE_EXPLORATION_ITERS = 250
TSNE_MIN_POINTS = 8  # below this, the first two PCA axes are returned directly


@dataclass
class ReductionReport:
    pca_dims: int
    tsne_iterations: int
    seed: int
    perplexity: float | None = None


@dataclass
class EmbeddingPoints:
    """2-D coordinates, one per retained map, plus how they were produced."""

    points: np.ndarray
    report: ReductionReport


def pca(data: np.ndarray, dims: int) -> np.ndarray:
    """Project rows onto the top principal components (SVD, mean-centered)."""
    data = np.asarray(data, dtype=np.float64)
    if dims <= 0:
        return np.zeros((data.shape[0], 0))
    centered = data - data.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:dims]
    # deterministic sign: make the largest-magnitude entry of each axis positive
    for row in comps:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return centered @ comps.T


def _conditional_probabilities(sq_dists: np.ndarray, perplexity: float) -> np.ndarray:
    """Binary-search per-point precisions to hit the target perplexity."""
    n = sq_dists.shape[0]
    target_entropy = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        beta_min, beta_max, beta = -np.inf, np.inf, 1.0
        row = sq_dists[i].copy()
        row[i] = np.inf
        finite = np.isfinite(row)
        for _ in range(100):
            num = np.zeros(n)
            num[finite] = np.exp(-row[finite] * beta)
            total = num.sum()
            if total <= 0:
                total = 1e-300
            pi = num / total
            entropy = np.log(total) + beta * float((row[finite] * pi[finite]).sum())
            diff = entropy - target_entropy
            if abs(diff) < 1e-7:
                break
            if diff > 0:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == -np.inf else (beta + beta_min) / 2.0
        p[i] = num / total
        p[i, i] = 0.0
    return p


def exact_tsne(
    data: np.ndarray,
    seed: int,
    perplexity: float,
    iterations: int = TSNE_ITERATIONS,
    learning_rate: float = TSNE_LEARNING_RATE,
) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    diff = data[:, None, :] - data[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    cond = _conditional_probabilities(sq, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)

    rng = np.random.default_rng(seed)
    y = rng.normal(scale=1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    exaggerated = p * TSNE_EARLY_EXAGGERATION
    for it in range(iterations):
        p_eff = exaggerated if it < TSNE_EXPLORATION_ITERS else p
        momentum = 0.5 if it < TSNE_EXPLORATION_ITERS else 0.8
        ydiff = y[:, None, :] - y[None, :, :]
        num = 1.0 / (1.0 + np.einsum("ijk,ijk->ij", ydiff, ydiff))
        np.fill_diagonal(num, 0.0)
        q_norm = num.sum()
        q = np.maximum(num / max(q_norm, 1e-300), 1e-12)
        pq = (p_eff - q) * num
        grad = 4.0 * np.einsum("ij,ijk->ik", pq, ydiff)
        flip = np.sign(grad) != np.sign(update)
        gains[flip] += 0.2
        gains[~flip] *= 0.8
        np.clip(gains, 0.01, None, out=gains)
        update = momentum * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
    return y


def reduce_maps(flattened: np.ndarray, seed: int) -> EmbeddingPoints:
    """Embed n flattened maps in 2-D: PCA to min(40, n-1, features), then t-SNE.

    With fewer than 8 maps t-SNE is skipped and the first two PCA coordinates
    (zero-padded if rank is short) are returned unchanged.
    """
    flattened = np.asarray(flattened, dtype=np.float64)
    if flattened.ndim != 2 or flattened.shape[0] < 1:
        raise ValidationError("expected a non-empty (maps, features) matrix")
    n, features = flattened.shape
    dims = min(40, n - 1, features)
    coords = pca(flattened, dims)
    if n < TSNE_MIN_POINTS:
        points = np.zeros((n, 2))
        points[:, : min(2, coords.shape[1])] = coords[:, :2]
        report = ReductionReport(pca_dims=dims, tsne_iterations=0, seed=seed)
        return EmbeddingPoints(points=points, report=report)
    perplexity = min(30.0, max(2.0, (n - 1) // 3))
    points = exact_tsne(coords, seed=seed, perplexity=perplexity)
    report = ReductionReport(
        pca_dims=dims, tsne_iterations=TSNE_ITERATIONS, seed=seed, perplexity=perplexity
    )
    return EmbeddingPoints(points=points, report=report)
