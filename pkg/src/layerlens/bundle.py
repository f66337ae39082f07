"""Activation/gradient bundles: the interface for externally-run models.

A bundle is a ``bundle.json`` manifest plus one little-endian float32 blob
per layer activation and per layer gradient, in (channel, row, column)
order. Any runtime that can export these files can feed the pipeline; the
built-in engine writes the same format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from layerlens.blobs import read_blob, write_blob
from layerlens.errors import ValidationError
from layerlens.model import ActivationTrace, LayerGradients, ModelSpec

BUNDLE_MANIFEST = "bundle.json"


@dataclass
class BundleLayer:
    name: str
    activations: np.ndarray  # (C, H, W)
    gradients: np.ndarray  # (C, H, W)


@dataclass
class ActivationBundle:
    image: str
    class_index: int
    class_names: list[str]
    layers: list[BundleLayer]

    def layer(self, name: str) -> BundleLayer:
        for entry in self.layers:
            if entry.name == name:
                return entry
        raise ValidationError(f"bundle has no layer {name!r}")


def save_bundle(
    directory: str | Path,
    image: str,
    class_index: int,
    class_names: list[str],
    layers: list[BundleLayer],
    config_hash: str = "",
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in layers:
        if layer.activations.shape != layer.gradients.shape:
            raise ValidationError(
                f"layer {layer.name!r}: activation shape {layer.activations.shape} "
                f"!= gradient shape {layer.gradients.shape}"
            )
        aname, gname = f"{layer.name}_act.f32", f"{layer.name}_grad.f32"
        write_blob(directory / aname, layer.activations)
        write_blob(directory / gname, layer.gradients)
        entries.append(
            {
                "name": layer.name,
                "shape": list(layer.activations.shape),
                "activations": aname,
                "gradients": gname,
            }
        )
    manifest = {
        "version": 1,
        "image": image,
        "class_index": class_index,
        "class_names": list(class_names),
        "config_hash": config_hash,
        "layers": entries,
    }
    path = directory / BUNDLE_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(path: str | Path) -> ActivationBundle:
    path = Path(path)
    if path.is_dir():
        path = path / BUNDLE_MANIFEST
    if not path.is_file():
        raise ValidationError(f"missing bundle manifest: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != 1:
        raise ValidationError(f"unsupported bundle version: {manifest.get('version')!r}")
    base = path.parent
    layers = []
    for entry in manifest["layers"]:
        shape = tuple(entry["shape"])
        if len(shape) != 3:
            raise ValidationError(f"layer {entry['name']!r}: bundle shapes must be [C, H, W]")
        act = read_blob(base / entry["activations"], shape)
        grad = read_blob(base / entry["gradients"], shape)
        layers.append(BundleLayer(name=entry["name"], activations=act, gradients=grad))
    return ActivationBundle(
        image=manifest["image"],
        class_index=int(manifest["class_index"]),
        class_names=list(manifest["class_names"]),
        layers=layers,
    )


def bundle_from_trace(
    model: ModelSpec,
    trace: ActivationTrace,
    gradients: list[LayerGradients],
    image: str,
    class_index: int,
) -> list[BundleLayer]:
    """Pair traced activations with computed gradients for the chosen layers."""
    layers = []
    for grads in gradients:
        idx = model.layer_index(grads.layer)
        act = trace.outputs[idx]
        if act.ndim != 3:
            raise ValidationError(f"layer {grads.layer!r} is not a 3-D feature map layer")
        layers.append(BundleLayer(name=grads.layer, activations=act, gradients=grads.gradients))
    return layers
