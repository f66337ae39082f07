"""Minimal sequential CNN engine with exact reverse-mode gradients.

Runs desk-scale models only (a handful of channels, small inputs). The
engine exists so the whole pipeline can be exercised end to end without an
external ML framework; activations and gradients of large real models enter
through the bundle interface instead (see :mod:`layerlens.bundle`).

Conventions, fixed by the on-disk format:
  - tensors are float64 in memory, row-major, (channel, row, column) for 3-D;
  - convolution is cross-correlation (no kernel flip) with zero padding;
  - max-pool backward routes the gradient to the first maximal element in
    row-major scan order when a window has ties;
  - gradients are taken of a class logit (pre-softmax score), never the loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from layerlens.blobs import read_blob, write_blob
from layerlens.errors import ValidationError


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    name: str

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, x_in: np.ndarray) -> np.ndarray:
        """Gradient of the seeded logit w.r.t. this layer's input."""
        raise NotImplementedError


@dataclass
class Conv2D(Layer):
    """2-D cross-correlation with zero padding. Weights: (out, in, kh, kw)."""

    name: str
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValidationError(f"{self.name}: expected 3-D input, got {in_shape}")
        c, h, w = in_shape
        oc, ic, kh, kw = self.weights.shape
        if ic != c:
            raise ValidationError(f"{self.name}: input has {c} channels, kernel expects {ic}")
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValidationError(f"{self.name}: kernel larger than padded input")
        return (oc, oh, ow)

    def forward(self, x):
        oc, ic, kh, kw = self.weights.shape
        _, oh, ow = self.out_shape(x.shape)
        p, s = self.padding, self.stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        out = np.tile(self.bias[:, None, None], (1, oh, ow))
        # accumulate one kernel offset at a time; inner op is a plain matmul
        for ky in range(kh):
            for kx in range(kw):
                patch = xp[:, ky : ky + s * oh : s, kx : kx + s * ow : s]
                out += np.einsum("oi,ihw->ohw", self.weights[:, :, ky, kx], patch)
        return out

    def backward(self, grad_out, x_in):
        oc, ic, kh, kw = self.weights.shape
        _, oh, ow = grad_out.shape
        p, s = self.padding, self.stride
        gx = np.zeros((ic, x_in.shape[1] + 2 * p, x_in.shape[2] + 2 * p))
        for ky in range(kh):
            for kx in range(kw):
                gx[:, ky : ky + s * oh : s, kx : kx + s * ow : s] += np.einsum(
                    "oi,ohw->ihw", self.weights[:, :, ky, kx], grad_out
                )
        if p:
            gx = gx[:, p:-p, p:-p]
        return gx


@dataclass
class ReLU(Layer):
    name: str

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, grad_out, x_in):
        return grad_out * (x_in > 0)


@dataclass
class MaxPool2D(Layer):
    name: str
    window: int = 2
    stride: int = 2

    def out_shape(self, in_shape):
        c, h, w = in_shape
        oh = (h - self.window) // self.stride + 1
        ow = (w - self.window) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValidationError(f"{self.name}: pool window larger than input")
        return (c, oh, ow)

    def forward(self, x):
        c, oh, ow = self.out_shape(x.shape)
        out = np.empty((c, oh, ow))
        for i in range(oh):
            for j in range(ow):
                win = x[
                    :,
                    i * self.stride : i * self.stride + self.window,
                    j * self.stride : j * self.stride + self.window,
                ]
                out[:, i, j] = win.reshape(c, -1).max(axis=1)
        return out

    def backward(self, grad_out, x_in):
        c, oh, ow = grad_out.shape
        gx = np.zeros_like(x_in)
        k = self.window
        for i in range(oh):
            for j in range(ow):
                win = x_in[:, i * self.stride : i * self.stride + k, j * self.stride : j * self.stride + k]
                flat = win.reshape(c, -1)
                idx = flat.argmax(axis=1)  # argmax -> first maximum in scan order
                for ch in range(c):
                    dy, dx = divmod(int(idx[ch]), k)
                    gx[ch, i * self.stride + dy, j * self.stride + dx] += grad_out[ch, i, j]
        return gx


@dataclass
class Flatten(Layer):
    name: str

    def out_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x):
        return x.reshape(-1)

    def backward(self, grad_out, x_in):
        return grad_out.reshape(x_in.shape)


@dataclass
class Dense(Layer):
    """Affine map y = W x + b. Weights: (out, in)."""

    name: str
    weights: np.ndarray
    bias: np.ndarray

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ValidationError(f"{self.name}: expected flat input, got {in_shape}")
        out, inp = self.weights.shape
        if inp != in_shape[0]:
            raise ValidationError(
                f"{self.name}: input dim {in_shape[0]} does not match weight dim {inp}"
            )
        return (out,)

    def forward(self, x):
        return self.weights @ x + self.bias

    def backward(self, grad_out, x_in):
        return self.weights.T @ grad_out


@dataclass
class Softmax(Layer):
    name: str

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        e = np.exp(x - x.max())
        return e / e.sum()

    def backward(self, grad_out, x_in):
        raise ValidationError("gradients are seeded at the logits, not through softmax")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class ModelSpec:
    """A validated sequential model: layer list, input shape, class names."""

    input_shape: tuple[int, ...]
    layers: list[Layer]
    class_names: list[str]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        shape = tuple(self.input_shape)
        softmax_seen = False
        for i, layer in enumerate(self.layers):
            if softmax_seen:
                raise ValidationError(f"layer {layer.name}: softmax must be the final layer")
            if isinstance(layer, Softmax):
                softmax_seen = True
            for arr_name in ("weights", "bias"):
                arr = getattr(layer, arr_name, None)
                if arr is not None and not np.all(np.isfinite(arr)):
                    raise ValidationError(f"layer {layer.name}: non-finite {arr_name}")
            shape = layer.out_shape(shape)
        logit_dim = self.logit_shape()[0]
        if len(self.class_names) != logit_dim:
            raise ValidationError(
                f"{len(self.class_names)} class names for logit dimension {logit_dim}"
            )

    def logit_layers(self) -> list[Layer]:
        """Layers up to and including the logits (softmax excluded)."""
        if self.layers and isinstance(self.layers[-1], Softmax):
            return self.layers[:-1]
        return list(self.layers)

    def logit_shape(self) -> tuple[int, ...]:
        shape = tuple(self.input_shape)
        for layer in self.logit_layers():
            shape = layer.out_shape(shape)
        if len(shape) != 1:
            raise ValidationError("model does not end in a flat logit vector")
        return shape

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise ValidationError(f"unknown layer: {name!r}")


@dataclass
class ActivationTrace:
    """Per-layer outputs of one forward pass plus the classification result."""

    outputs: list[np.ndarray]
    logits: np.ndarray
    probabilities: np.ndarray
    predicted: int
    image: np.ndarray = field(repr=False, default=None)


@dataclass
class LayerGradients:
    layer: str
    gradients: np.ndarray


def forward(model: ModelSpec, image: np.ndarray) -> ActivationTrace:
    """Run the model on one image (values in [0, 1]) and record every activation."""
    image = np.asarray(image, dtype=np.float64)
    if tuple(image.shape) != tuple(model.input_shape):
        raise ValidationError(
            f"image shape {image.shape} does not match model input {tuple(model.input_shape)}"
        )
    if image.min() < -1e-12 or image.max() > 1 + 1e-12:
        raise ValidationError("pixel values must lie in [0, 1]")
    outputs = []
    x = image
    for layer in model.layers:
        x = layer.forward(x)
        outputs.append(x)
    logit_count = len(model.logit_layers())
    logits = outputs[logit_count - 1]
    e = np.exp(logits - logits.max())
    probabilities = e / e.sum()
    return ActivationTrace(
        outputs=outputs,
        logits=logits,
        probabilities=probabilities,
        predicted=int(np.argmax(logits)),
        image=image,
    )


def backward_seeded(
    model: ModelSpec, trace: ActivationTrace, seed: np.ndarray, layer: str
) -> LayerGradients:
    """Exact gradient of ``seed . logits`` w.r.t. the named layer's output."""
    idx = model.layer_index(layer)
    logit_layers = model.logit_layers()
    last = len(logit_layers) - 1
    if idx >= last:
        raise ValidationError(f"layer {layer!r} must precede the final dense layer")
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != trace.logits.shape:
        raise ValidationError("seed shape does not match logits")
    grad = seed
    for i in range(last, idx, -1):
        x_in = trace.outputs[i - 1] if i > 0 else trace.image
        grad = model.layers[i].backward(grad, x_in)
    return LayerGradients(layer=layer, gradients=grad)


def backward_to_layer(
    model: ModelSpec, trace: ActivationTrace, class_index: int, layer: str
) -> LayerGradients:
    """Gradient of the class logit (pre-softmax) w.r.t. a layer's activation."""
    if not 0 <= class_index < len(model.class_names):
        raise ValidationError(f"class index {class_index} out of range")
    seed = np.zeros_like(trace.logits)
    seed[class_index] = 1.0
    return backward_seeded(model, trace, seed, layer)


# ---------------------------------------------------------------------------
# on-disk format: model.json + one float32 blob per parameter tensor
# ---------------------------------------------------------------------------

MODEL_MANIFEST = "model.json"


def save_model(model: ModelSpec, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for layer in model.layers:
        if isinstance(layer, Conv2D):
            wname, bname = f"{layer.name}_w.f32", f"{layer.name}_b.f32"
            write_blob(directory / wname, layer.weights)
            write_blob(directory / bname, layer.bias)
            layers.append(
                {
                    "type": "conv2d",
                    "name": layer.name,
                    "out_channels": layer.weights.shape[0],
                    "in_channels": layer.weights.shape[1],
                    "kernel": list(layer.weights.shape[2:]),
                    "stride": layer.stride,
                    "padding": layer.padding,
                    "weights": wname,
                    "bias": bname,
                }
            )
        elif isinstance(layer, Dense):
            wname, bname = f"{layer.name}_w.f32", f"{layer.name}_b.f32"
            write_blob(directory / wname, layer.weights)
            write_blob(directory / bname, layer.bias)
            layers.append(
                {
                    "type": "dense",
                    "name": layer.name,
                    "out_features": layer.weights.shape[0],
                    "in_features": layer.weights.shape[1],
                    "weights": wname,
                    "bias": bname,
                }
            )
        elif isinstance(layer, ReLU):
            layers.append({"type": "relu", "name": layer.name})
        elif isinstance(layer, MaxPool2D):
            layers.append(
                {
                    "type": "maxpool2d",
                    "name": layer.name,
                    "window": layer.window,
                    "stride": layer.stride,
                }
            )
        elif isinstance(layer, Flatten):
            layers.append({"type": "flatten", "name": layer.name})
        elif isinstance(layer, Softmax):
            layers.append({"type": "softmax", "name": layer.name})
        else:
            raise ValidationError(f"cannot serialize layer type {type(layer).__name__}")
    manifest = {
        "version": 1,
        "input_shape": list(model.input_shape),
        "class_names": list(model.class_names),
        "layers": layers,
    }
    path = directory / MODEL_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_model(path: str | Path) -> ModelSpec:
    """Load and validate a model from its manifest (or its directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / MODEL_MANIFEST
    if not path.is_file():
        raise ValidationError(f"missing model manifest: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != 1:
        raise ValidationError(f"unsupported model format version: {manifest.get('version')!r}")
    base = path.parent
    layers: list[Layer] = []
    for entry in manifest["layers"]:
        kind, name = entry["type"], entry["name"]
        try:
            if kind == "conv2d":
                kh, kw = entry["kernel"]
                w = read_blob(base / entry["weights"], (entry["out_channels"], entry["in_channels"], kh, kw))
                b = read_blob(base / entry["bias"], (entry["out_channels"],))
                layers.append(Conv2D(name, w, b, stride=entry["stride"], padding=entry["padding"]))
            elif kind == "dense":
                w = read_blob(base / entry["weights"], (entry["out_features"], entry["in_features"]))
                b = read_blob(base / entry["bias"], (entry["out_features"],))
                layers.append(Dense(name, w, b))
            elif kind == "relu":
                layers.append(ReLU(name))
            elif kind == "maxpool2d":
                layers.append(MaxPool2D(name, window=entry["window"], stride=entry["stride"]))
            elif kind == "flatten":
                layers.append(Flatten(name))
            elif kind == "softmax":
                layers.append(Softmax(name))
            else:
                raise ValidationError(f"unknown layer type {kind!r}")
        except ValidationError as err:
            raise ValidationError(f"layer {name!r}: {err}") from err
    try:
        return ModelSpec(
            input_shape=tuple(manifest["input_shape"]),
            layers=layers,
            class_names=list(manifest["class_names"]),
        )
    except ValidationError as err:
        raise ValidationError(f"{path.name}: {err}") from err
