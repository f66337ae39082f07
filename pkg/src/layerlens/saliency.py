"""Turn one layer's feature maps and gradients into weighted cluster maps.

The chain per layer: channel weights by global-average-pooled gradients,
unit normalization with non-positive channels dropped, a weight-fraction
threshold, 2-D embedding of the retained maps, ward clustering with
silhouette-selected cluster count, then a weighted-average merge per
cluster. Merging preserves the exact identity

    sum_i w_Ci * A_Ci == sum_k w_k * A^k   (over retained channels)

so the classic class-activation map is recoverable from the cluster maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from layerlens import clustering
from layerlens.blobs import read_blob, stable_sum, write_blob
from layerlens.clustering import ClusterAssignment
from layerlens.errors import NoPositiveEvidenceError, ValidationError
from layerlens.reduction import EmbeddingPoints, reduce_maps


@dataclass
class FeatureMapSet:
    """Channel maps of one layer with their raw class-gradient weights."""

    layer: str
    maps: np.ndarray  # (C, H, W)
    weights: np.ndarray  # (C,)

    def __post_init__(self):
        if self.maps.ndim != 3:
            raise ValidationError("feature maps must be (C, H, W)")
        if len(self.weights) != self.maps.shape[0]:
            raise ValidationError("one weight per channel map required")


@dataclass
class RetainedSet:
    """Channels surviving normalization and the weight threshold.

    ``weights`` are unit-normalized over all positive channels but NOT
    renormalized after thresholding, so ``fraction`` (their sum) reports how
    much of the layer's positive weight the retained channels carry.
    """

    layer: str
    indices: np.ndarray  # original channel indices, (n,)
    weights: np.ndarray  # normalized weights of retained channels, (n,)
    fraction: float
    normalized_maps: np.ndarray  # min-max scaled copies for clustering, (n, H, W)
    positive_count: int
    channel_count: int


@dataclass
class ClusterMap:
    """A weighted-average saliency map for one cluster of channels."""

    id: str
    layer: str
    map: np.ndarray  # (H, W)
    weight: float
    members: list[int]  # original channel indices


@dataclass
class SaliencyMap:
    map: np.ndarray
    provenance: str  # "direct" or "cluster-recomposition"


def gradcam_weights(activations: np.ndarray, gradients: np.ndarray, layer: str = "") -> FeatureMapSet:
    """Channel weights: spatial mean of the class-logit gradient per channel."""
    activations = np.asarray(activations, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if activations.shape != gradients.shape:
        raise ValidationError(
            f"activation shape {activations.shape} != gradient shape {gradients.shape}"
        )
    if activations.ndim != 3:
        raise ValidationError("expected (C, H, W) tensors")
    weights = gradients.mean(axis=(1, 2))
    return FeatureMapSet(layer=layer, maps=activations, weights=weights)


def default_threshold(channel_count: int) -> float:
    """Default weight-fraction threshold, scaled inversely with channel count."""
    return 0.9 / channel_count


def minmax(emap: np.ndarray) -> np.ndarray:
    """Scale one map to [0, 1]; constant maps become all-zero."""
    lo, hi = float(emap.min()), float(emap.max())
    if hi - lo == 0:
        return np.zeros_like(emap)
    return (emap - lo) / (hi - lo)


def normalize_and_threshold(fset: FeatureMapSet, tau_f: float | None = None) -> RetainedSet:
    """Drop non-positive channels, unit-normalize, drop weights <= tau_f.

    No renormalization happens after the threshold, so the retained weights
    still sum to the reported fraction of the layer's positive weight.
    """
    if tau_f is None:
        tau_f = default_threshold(len(fset.weights))
    if not 0 <= tau_f < 1:
        raise ValidationError(f"threshold must lie in [0, 1), got {tau_f}")
    weights = fset.weights
    positive = np.flatnonzero(weights > 0)
    if len(positive) == 0:
        raise NoPositiveEvidenceError(
            f"layer {fset.layer!r}: no positive channel weights for this class"
        )
    total = stable_sum(weights[positive])
    normalized = weights[positive] / total
    keep = normalized > tau_f
    indices = positive[keep]
    kept_weights = normalized[keep]
    if len(indices) == 0:
        raise NoPositiveEvidenceError(
            f"layer {fset.layer!r}: threshold {tau_f} removed every channel"
        )
    normalized_maps = np.stack([minmax(fset.maps[i]) for i in indices])
    return RetainedSet(
        layer=fset.layer,
        indices=indices,
        weights=kept_weights,
        fraction=stable_sum(kept_weights),
        normalized_maps=normalized_maps,
        positive_count=len(positive),
        channel_count=len(weights),
    )


def _canonical_member_order(retained: RetainedSet) -> np.ndarray:
    """Content-based order of retained maps (input-order independent).

    The normalized weight joins the key so channels whose min-max images
    coincide (affine twins) still order deterministically.
    """
    n = len(retained.indices)
    keyed = np.concatenate(
        [retained.normalized_maps.reshape(n, -1), retained.weights.reshape(n, 1)], axis=1
    )
    return clustering.canonical_order(keyed)


def reduce_dims(retained: RetainedSet, seed: int) -> EmbeddingPoints:
    """2-D embedding of the retained min-max maps (PCA, then exact t-SNE).

    Maps are fed to the reducer in a canonical content order so a permuted
    input yields the same point per map bit for bit.
    """
    order = _canonical_member_order(retained)
    inverse = np.argsort(order)
    flat = retained.normalized_maps.reshape(len(retained.indices), -1)[order]
    embedded = reduce_maps(flat, seed)
    return EmbeddingPoints(points=embedded.points[inverse], report=embedded.report)


def cluster_layer(
    points: EmbeddingPoints, retained: RetainedSet, k_min: int = 3, k_max: int = 8
) -> ClusterAssignment:
    """Ward-cluster the embedded maps of one layer, k chosen by silhouette."""
    if len(points.points) != len(retained.indices):
        raise ValidationError("one embedding point per retained map required")
    return clustering.cluster_layer(points.points, k_min=k_min, k_max=k_max)


def merge_clusters(
    retained: RetainedSet, assignment: ClusterAssignment, original_maps: FeatureMapSet
) -> list[ClusterMap]:
    """Weighted-average merge of each cluster's ORIGINAL maps.

    Cluster weight is the sum of member weights; the map is the member-weight
    average, so summing weight * map over clusters reproduces the retained
    channels' weighted sum exactly.
    """
    if len(assignment.labels) != len(retained.indices):
        raise ValidationError("assignment does not cover the retained set")
    order = _canonical_member_order(retained)
    merged = []
    for cluster in range(assignment.n_clusters):
        member_pos = [int(i) for i in order if assignment.labels[i] == cluster]
        if not member_pos:
            raise ValidationError(f"cluster {cluster} is empty")
        w = stable_sum(retained.weights[member_pos])
        acc = np.zeros(original_maps.maps.shape[1:])
        for i in member_pos:
            acc = acc + retained.weights[i] * original_maps.maps[retained.indices[i]]
        merged.append(
            ClusterMap(
                id="",
                layer=retained.layer,
                map=acc / w,
                weight=w,
                members=sorted(int(retained.indices[i]) for i in member_pos),
            )
        )
    merged.sort(key=lambda m: (-m.weight, m.members))
    for rank, cmap in enumerate(merged):
        cmap.id = f"{retained.layer}.c{rank}"
    return merged


def cluster_weight_threshold(weights: list[float]) -> float:
    """Heuristic cut for low-weight clusters: max(max/3, mean/2)."""
    arr = np.asarray(weights, dtype=np.float64)
    return float(max(arr.max() / 3.0, arr.mean() / 2.0))


def threshold_cluster_maps(maps: list[ClusterMap]) -> list[ClusterMap]:
    """Keep clusters whose weight reaches the heuristic threshold.

    The heaviest cluster always survives.
    """
    if not maps:
        raise ValidationError("no cluster maps to threshold")
    th = cluster_weight_threshold([m.weight for m in maps])
    return [m for m in maps if m.weight >= th]


def compose_gradcam(
    maps: list[ClusterMap], relu: bool = False, shape: tuple[int, int] | None = None
) -> SaliencyMap:
    """Recompose the layer saliency map as sum(weight * cluster map)."""
    if not maps:
        if shape is None:
            raise ValidationError("shape required to compose an empty cluster set")
        out = np.zeros(shape)
        return SaliencyMap(map=out, provenance="cluster-recomposition")
    layers = {m.layer for m in maps}
    if len(layers) > 1:
        raise ValidationError(f"cluster maps from mixed layers: {sorted(layers)}")
    out = np.zeros_like(maps[0].map)
    for cmap in sorted(maps, key=lambda m: (m.id, m.members)):
        out = out + cmap.weight * cmap.map
    if relu:
        out = np.maximum(out, 0.0)
    return SaliencyMap(map=out, provenance="cluster-recomposition")


def direct_saliency(retained: RetainedSet, original_maps: FeatureMapSet, relu: bool = False) -> SaliencyMap:
    """Weighted channel sum over the retained set, without clustering."""
    out = np.zeros(original_maps.maps.shape[1:])
    order = _canonical_member_order(retained)
    for i in order:
        out = out + retained.weights[i] * original_maps.maps[retained.indices[i]]
    if relu:
        out = np.maximum(out, 0.0)
    return SaliencyMap(map=out, provenance="direct")


# ---------------------------------------------------------------------------
# persistence: per-layer manifest + one float32 blob per cluster map
# ---------------------------------------------------------------------------


@dataclass
class LayerClusters:
    """Everything the pipeline keeps for one (image, layer) clustering."""

    layer: str
    maps: list[ClusterMap]
    retained_fraction: float
    retained_count: int
    positive_count: int
    channel_count: int
    tau_f: float
    silhouette: float | None
    candidates: dict[int, float] = field(default_factory=dict)
    surviving_ids: list[str] = field(default_factory=list)

    def surviving(self) -> list[ClusterMap]:
        ids = set(self.surviving_ids)
        return [m for m in self.maps if m.id in ids]


def save_layer_clusters(directory: str | Path, result: LayerClusters, config_hash: str = "") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for cmap in result.maps:
        blob = f"{cmap.id.replace('/', '_')}.f32"
        write_blob(directory / blob, cmap.map)
        entries.append(
            {
                "id": cmap.id,
                "blob": blob,
                "shape": list(cmap.map.shape),
                "weight": cmap.weight,
                "members": cmap.members,
            }
        )
    manifest = {
        "version": 1,
        "layer": result.layer,
        "config_hash": config_hash,
        "tau_f": result.tau_f,
        "channel_count": result.channel_count,
        "positive_count": result.positive_count,
        "retained_count": result.retained_count,
        "retained_fraction": result.retained_fraction,
        "silhouette": result.silhouette,
        "silhouette_candidates": {str(k): v for k, v in sorted(result.candidates.items())},
        "surviving_ids": result.surviving_ids,
        "maps": entries,
    }
    path = directory / "clusters.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_layer_clusters(directory: str | Path) -> LayerClusters:
    directory = Path(directory)
    path = directory / "clusters.json"
    if not path.is_file():
        raise ValidationError(f"missing cluster manifest: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != 1:
        raise ValidationError(f"unsupported cluster manifest version: {manifest.get('version')!r}")
    maps = []
    for entry in manifest["maps"]:
        arr = read_blob(directory / entry["blob"], tuple(entry["shape"]))
        maps.append(
            ClusterMap(
                id=entry["id"],
                layer=manifest["layer"],
                map=arr,
                weight=float(entry["weight"]),
                members=list(entry["members"]),
            )
        )
    return LayerClusters(
        layer=manifest["layer"],
        maps=maps,
        retained_fraction=float(manifest["retained_fraction"]),
        retained_count=int(manifest["retained_count"]),
        positive_count=int(manifest["positive_count"]),
        channel_count=int(manifest["channel_count"]),
        tau_f=float(manifest["tau_f"]),
        silhouette=manifest["silhouette"],
        candidates={int(k): v for k, v in manifest["silhouette_candidates"].items()},
        surviving_ids=list(manifest["surviving_ids"]),
    )


def analyze_layer(
    fset: FeatureMapSet,
    seed: int,
    tau_f: float | None = None,
    k_min: int = 3,
    k_max: int = 8,
) -> LayerClusters:
    """Full per-layer chain: threshold, embed, cluster, merge, weight-filter."""
    retained = normalize_and_threshold(fset, tau_f)
    points = reduce_dims(retained, seed)
    assignment = cluster_layer(points, retained, k_min=k_min, k_max=k_max)
    merged = merge_clusters(retained, assignment, fset)
    surviving = threshold_cluster_maps(merged)
    return LayerClusters(
        layer=fset.layer,
        maps=merged,
        retained_fraction=retained.fraction,
        retained_count=len(retained.indices),
        positive_count=retained.positive_count,
        channel_count=retained.channel_count,
        tau_f=tau_f if tau_f is not None else default_threshold(retained.channel_count),
        silhouette=assignment.silhouette,
        candidates=assignment.candidates,
        surviving_ids=[m.id for m in surviving],
    )
