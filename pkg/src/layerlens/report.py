"""Per-layer pipeline report: a delimited table plus matplotlib figures.

For each analyzed layer the report averages, across images: the channel
threshold in force, the cluster count surviving the weight cut, the share
of channels retained, and the share of weight those surviving clusters
carry. The retained-weight share after the channel threshold is included so
runs can be eyeballed against the expected 70-90 % ballpark for healthy
layers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from layerlens.errors import ValidationError
from layerlens.saliency import LayerClusters

REPORT_COLUMNS = [
    "layer",
    "fmaps threshold",
    "leftover clusters",
    "leftover fmaps",
    "leftover weight",
    "retained weight",
]


@dataclass
class LayerReportRow:
    layer: str
    threshold: float
    leftover_clusters: float
    leftover_fmaps: float  # fraction of channels retained
    leftover_weight: float  # weight fraction carried by surviving clusters
    retained_weight: float  # weight fraction after the channel threshold
    images: int


def summarize(per_image_layers: list[list[LayerClusters]]) -> list[LayerReportRow]:
    """Average per-layer statistics across images (layer order preserved)."""
    if not per_image_layers or not any(per_image_layers):
        raise ValidationError("nothing to report: no cluster results found")
    order: list[str] = []
    buckets: dict[str, list[LayerClusters]] = {}
    for image_layers in per_image_layers:
        for result in image_layers:
            if result.layer not in buckets:
                order.append(result.layer)
            buckets.setdefault(result.layer, []).append(result)
    rows = []
    for layer in order:
        results = buckets[layer]
        surviving_weight = [
            sum(m.weight for m in r.surviving()) for r in results
        ]
        rows.append(
            LayerReportRow(
                layer=layer,
                threshold=float(np.mean([r.tau_f for r in results])),
                leftover_clusters=float(np.mean([len(r.surviving_ids) for r in results])),
                leftover_fmaps=float(
                    np.mean([r.retained_count / r.channel_count for r in results])
                ),
                leftover_weight=float(np.mean(surviving_weight)),
                retained_weight=float(np.mean([r.retained_fraction for r in results])),
                images=len(results),
            )
        )
    return rows


def format_table(rows: list[LayerReportRow]) -> str:
    header = f"{'layer':<12} {'fmaps threshold':>16} {'leftover clusters':>18} {'leftover fmaps':>15} {'leftover weight':>16} {'retained weight':>16}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row.layer:<12} {'<' + format(row.threshold * 100, '.2f') + '%':>16} "
            f"{row.leftover_clusters:>18.1f} {row.leftover_fmaps * 100:>14.1f}% "
            f"{row.leftover_weight * 100:>15.1f}% {row.retained_weight * 100:>15.1f}%"
        )
    return "\n".join(lines)


def write_table(rows: list[LayerReportRow], path: str | Path) -> Path:
    """Tab-separated table, one row per layer."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(REPORT_COLUMNS + ["images"])]
    for row in rows:
        lines.append(
            "\t".join(
                [
                    row.layer,
                    f"{row.threshold:.6f}",
                    f"{row.leftover_clusters:.3f}",
                    f"{row.leftover_fmaps:.4f}",
                    f"{row.leftover_weight:.4f}",
                    f"{row.retained_weight:.4f}",
                    str(row.images),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")
    return path


def render_figures(rows: list[LayerReportRow], directory: str | Path) -> list[Path]:
    """Bar charts of the table columns; returns the written figure paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = [row.layer for row in rows]
    x = np.arange(len(rows))
    written = []

    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(rows)), 3.2))
    ax.bar(x - 0.18, [r.retained_weight * 100 for r in rows], width=0.36, label="after channel threshold")
    ax.bar(x + 0.18, [r.leftover_weight * 100 for r in rows], width=0.36, label="after cluster threshold")
    ax.axhspan(70, 90, color="tab:green", alpha=0.12, label="70-90% target band")
    ax.set_xticks(x, layers, rotation=30, ha="right")
    ax.set_ylabel("weight kept (%)")
    ax.set_title("Weight retained per layer")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = directory / "weight_retention.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, axes = plt.subplots(1, 2, figsize=(max(6.0, 2.0 * len(rows)), 3.2))
    axes[0].bar(x, [r.leftover_clusters for r in rows], color="tab:blue")
    axes[0].set_xticks(x, layers, rotation=30, ha="right")
    axes[0].set_title("Surviving clusters")
    axes[1].bar(x, [r.leftover_fmaps * 100 for r in rows], color="tab:orange")
    axes[1].set_xticks(x, layers, rotation=30, ha="right")
    axes[1].set_title("Channels retained (%)")
    fig.tight_layout()
    path = directory / "cluster_summary.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written
