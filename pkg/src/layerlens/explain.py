"""Assemble labeled cluster maps into per-image and per-class explanations.

An INV (layer-wise network view) lists, for one image, each analyzed layer's
cluster maps with their weights and top labels, ordered shallow to deep.
Global explanations aggregate label weights across the INVs of a class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from layerlens.errors import ValidationError

MAX_LABELS_PER_MAP = 3
SCHEMA_VERSION = 1


@dataclass
class ClusterEntry:
    map_ref: str
    weight: float
    labels: list[tuple[str, float]]  # (label, score), best first


@dataclass
class LayerEntry:
    layer: str
    entries: list[ClusterEntry]


@dataclass
class INVExplanation:
    image: str
    predicted_class: str
    layers: list[LayerEntry]


@dataclass
class GlobalEntry:
    label: str
    weight: float
    support: int
    exemplar: str


@dataclass
class GlobalExplanation:
    class_name: str
    layer: str
    entries: list[GlobalEntry]
    source_images: list[str] = field(default_factory=list)


def assemble_inv(
    image: str,
    predicted_class: str,
    layers: list[tuple[str, list[tuple[str, float, list[tuple[str, float]]]]]],
    max_labels: int = MAX_LABELS_PER_MAP,
) -> INVExplanation:
    """Build an INV from per-layer (map_ref, weight, scored labels) triples.

    Layers arrive shallow to deep. Every map must carry at least one scored
    label; per map only the top ``max_labels`` labels are kept.
    """
    layer_entries = []
    for layer_name, maps in layers:
        entries = []
        for map_ref, weight, labels in maps:
            if not labels:
                raise ValidationError(f"cluster map {map_ref!r} has no scored labels")
            ranked = sorted(labels, key=lambda it: (-it[1], it[0]))[:max_labels]
            entries.append(ClusterEntry(map_ref=map_ref, weight=float(weight), labels=ranked))
        entries.sort(key=lambda e: (-e.weight, e.map_ref))
        total = sum(e.weight for e in entries)
        if total > 1 + 1e-9:
            raise ValidationError(f"layer {layer_name!r}: weights sum to {total} > 1")
        layer_entries.append(LayerEntry(layer=layer_name, entries=entries))
    return INVExplanation(image=image, predicted_class=predicted_class, layers=layer_entries)


def aggregate_global(
    invs: list[INVExplanation], layer: str, top_n: int = 5, class_name: str | None = None
) -> GlobalExplanation:
    """Aggregate top labels for one class and layer across images.

    A label participates wherever it is some map's top label in the chosen
    layer; its global weight is the mean of those maps' weights, its support
    the map count, and its exemplar the contributing map with the highest
    label score. Input order does not matter.
    """
    if not invs:
        raise ValidationError("no explanations to aggregate")
    classes = {inv.predicted_class for inv in invs}
    if class_name is None:
        if len(classes) > 1:
            raise ValidationError(f"explanations span multiple classes: {sorted(classes)}")
        class_name = next(iter(classes))
    contributions: dict[str, list[tuple[float, float, str]]] = {}
    layer_found = False
    for inv in invs:
        for layer_entry in inv.layers:
            if layer_entry.layer != layer:
                continue
            layer_found = True
            for entry in layer_entry.entries:
                top_label, top_score = entry.labels[0]
                contributions.setdefault(top_label, []).append(
                    (entry.weight, top_score, entry.map_ref)
                )
    if not layer_found:
        raise ValidationError(f"layer {layer!r} appears in no explanation")
    entries = []
    for label, rows in contributions.items():
        rows = sorted(rows)  # canonical order: input order independent
        weight = sum(r[0] for r in rows) / len(rows)
        exemplar = max(rows, key=lambda r: (r[1], r[2]))[2]
        entries.append(GlobalEntry(label=label, weight=weight, support=len(rows), exemplar=exemplar))
    entries.sort(key=lambda e: (-e.weight, e.label))
    images = sorted({inv.image for inv in invs})
    return GlobalExplanation(
        class_name=class_name, layer=layer, entries=entries[:top_n], source_images=images
    )


# ---------------------------------------------------------------------------
# versioned JSON import/export
# ---------------------------------------------------------------------------


def export_explanation(
    x: INVExplanation | GlobalExplanation, path: str | Path, config_hash: str = ""
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(x, INVExplanation):
        doc = {
            "version": SCHEMA_VERSION,
            "kind": "inv",
            "config_hash": config_hash,
            "image": x.image,
            "predicted_class": x.predicted_class,
            "layers": [
                {
                    "layer": le.layer,
                    "entries": [
                        {
                            "map_ref": e.map_ref,
                            "weight": e.weight,
                            "labels": [{"label": l, "score": s} for l, s in e.labels],
                        }
                        for e in le.entries
                    ],
                }
                for le in x.layers
            ],
        }
    elif isinstance(x, GlobalExplanation):
        doc = {
            "version": SCHEMA_VERSION,
            "kind": "global",
            "config_hash": config_hash,
            "class": x.class_name,
            "layer": x.layer,
            "source_images": x.source_images,
            "entries": [
                {
                    "label": e.label,
                    "weight": e.weight,
                    "support": e.support,
                    "exemplar": e.exemplar,
                }
                for e in x.entries
            ],
        }
    else:
        raise ValidationError(f"cannot export {type(x).__name__}")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def import_explanation(
    path: str | Path, map_resolver=None
) -> INVExplanation | GlobalExplanation:
    """Load an explanation document; optionally check every map ref resolves."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing explanation file: {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != SCHEMA_VERSION:
        raise ValidationError(f"unsupported explanation schema version: {doc.get('version')!r}")
    kind = doc.get("kind")
    if kind == "inv":
        inv = INVExplanation(
            image=doc["image"],
            predicted_class=doc["predicted_class"],
            layers=[
                LayerEntry(
                    layer=le["layer"],
                    entries=[
                        ClusterEntry(
                            map_ref=e["map_ref"],
                            weight=float(e["weight"]),
                            labels=[(l["label"], float(l["score"])) for l in e["labels"]],
                        )
                        for e in le["entries"]
                    ],
                )
                for le in doc["layers"]
            ],
        )
        if map_resolver is not None:
            for le in inv.layers:
                for entry in le.entries:
                    if not map_resolver(entry.map_ref):
                        raise ValidationError(f"dangling cluster-map ref: {entry.map_ref!r}")
        return inv
    if kind == "global":
        out = GlobalExplanation(
            class_name=doc["class"],
            layer=doc["layer"],
            source_images=list(doc.get("source_images", [])),
            entries=[
                GlobalEntry(
                    label=e["label"],
                    weight=float(e["weight"]),
                    support=int(e["support"]),
                    exemplar=e["exemplar"],
                )
                for e in doc["entries"]
            ],
        )
        if map_resolver is not None:
            for entry in out.entries:
                if not map_resolver(entry.exemplar):
                    raise ValidationError(f"dangling cluster-map ref: {entry.exemplar!r}")
        return out
    raise ValidationError(f"unknown explanation kind: {kind!r}")
