"""Agglomerative clustering and silhouette-based cluster-count selection.

Two linkages are used in the pipeline: ward (Lance-Williams updates on
squared Euclidean distances) for the 2-D feature-map embeddings, and
complete linkage on cosine distances for label embeddings. Both build the
full merge tree once; any cluster count is a cut of that tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from layerlens.errors import ValidationError


@dataclass
class Merge:
    """One agglomeration step: clusters a and b join at the given cost."""

    a: int
    b: int
    cost: float
    members_a: frozenset[int]
    members_b: frozenset[int]


def squared_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def linkage(dist0: np.ndarray, method: str, sizes: np.ndarray | None = None) -> list[Merge]:
    """Full agglomerative merge sequence from an initial distance matrix.

    ``dist0`` is squared Euclidean for ward (the recurrence then tracks twice
    the within-cluster variance increase) and plain distances for complete
    linkage. Ties break toward the lexicographically smallest index pair.
    """
    n = dist0.shape[0]
    if dist0.shape != (n, n):
        raise ValidationError("distance matrix must be square")
    d = dist0.astype(np.float64).copy()
    np.fill_diagonal(d, np.inf)
    active = list(range(n))
    size = np.ones(n) if sizes is None else sizes.astype(np.float64).copy()
    members = [frozenset([i]) for i in range(n)]
    merges: list[Merge] = []
    for _ in range(n - 1):
        best = (np.inf, -1, -1)
        for ai, i in enumerate(active):
            for j in active[ai + 1 :]:
                if d[i, j] < best[0]:
                    best = (d[i, j], i, j)
        cost, i, j = best
        merges.append(Merge(a=i, b=j, cost=float(cost), members_a=members[i], members_b=members[j]))
        # Lance-Williams update of distances from the merged cluster i|j
        for k in active:
            if k in (i, j):
                continue
            if method == "ward":
                tot = size[i] + size[j] + size[k]
                d_new = (
                    (size[i] + size[k]) * d[i, k]
                    + (size[j] + size[k]) * d[j, k]
                    - size[k] * d[i, j]
                ) / tot
            elif method == "complete":
                d_new = max(d[i, k], d[j, k])
            else:
                raise ValidationError(f"unknown linkage method {method!r}")
            d[i, k] = d[k, i] = d_new
        members[i] = members[i] | members[j]
        size[i] += size[j]
        active.remove(j)
        d[j, :] = np.inf
        d[:, j] = np.inf
    return merges


def cut(merges: list[Merge], n: int, k: int) -> np.ndarray:
    """Labels for a k-cluster cut; clusters numbered by first member index."""
    if not 1 <= k <= n:
        raise ValidationError(f"cannot cut {n} points into {k} clusters")
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for merge in merges[: n - k]:
        parent[find(merge.b)] = find(merge.a)
    labels = np.empty(n, dtype=int)
    seen: dict[int, int] = {}
    for i in range(n):
        root = find(i)
        if root not in seen:
            seen[root] = len(seen)
        labels[i] = seen[root]
    return labels


def silhouette_values(dist: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-point silhouette (b - a) / max(a, b); singleton clusters score 0."""
    n = len(labels)
    unique = np.unique(labels)
    if len(unique) < 2:
        raise ValidationError("silhouette needs at least 2 clusters")
    values = np.zeros(n)
    for i in range(n):
        same = labels == labels[i]
        n_same = same.sum()
        if n_same <= 1:
            continue
        a = dist[i, same].sum() / (n_same - 1)
        b = np.inf
        for c in unique:
            if c == labels[i]:
                continue
            other = labels == c
            b = min(b, dist[i, other].mean())
        denom = max(a, b)
        values[i] = 0.0 if denom == 0 else (b - a) / denom
    return values


@dataclass
class ClusterAssignment:
    """Chosen flat clustering of the retained maps of one layer."""

    labels: np.ndarray
    n_clusters: int
    silhouette: float | None
    candidates: dict[int, float] = field(default_factory=dict)


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Content-based ordering so results do not depend on input order."""
    keys = [tuple(row) for row in np.asarray(points, dtype=np.float64)]
    return np.array(sorted(range(len(keys)), key=lambda i: keys[i]), dtype=int)


def cluster_layer(
    points: np.ndarray, k_min: int = 3, k_max: int = 8
) -> ClusterAssignment:
    """Ward-cluster 2-D embedding points, picking k by average silhouette.

    The candidate range is clipped into [2, n-1]; silhouette ties break
    toward fewer clusters. With n <= 3 points each point is its own cluster
    and no silhouette is reported.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        raise ValidationError("no points to cluster")
    if k_min > k_max:
        raise ValidationError(f"bad cluster range [{k_min}, {k_max}]")
    if n <= 3:
        return ClusterAssignment(labels=np.arange(n), n_clusters=n, silhouette=None)

    order = canonical_order(points)
    inverse = np.argsort(order)
    pts = points[order]
    merges = linkage(squared_distances(pts), "ward")
    dist = np.sqrt(squared_distances(pts))

    lo = int(np.clip(k_min, 2, n - 1))
    hi = int(np.clip(k_max, 2, n - 1))
    lo = min(lo, hi)
    candidates: dict[int, float] = {}
    best_k, best_score = None, -np.inf
    for k in range(lo, hi + 1):
        labels_k = cut(merges, n, k)
        score = float(silhouette_values(dist, labels_k).mean())
        candidates[k] = score
        if score > best_score:
            best_k, best_score = k, score
    labels = cut(merges, n, best_k)[inverse]
    # renumber by first occurrence in the original order
    seen: dict[int, int] = {}
    out = np.empty(n, dtype=int)
    for i, lab in enumerate(labels):
        if lab not in seen:
            seen[lab] = len(seen)
        out[i] = seen[lab]
    return ClusterAssignment(
        labels=out, n_clusters=best_k, silhouette=best_score, candidates=candidates
    )
