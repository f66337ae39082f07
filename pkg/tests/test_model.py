"""Engine tests: forward/backward against naive reference code and finite
differences, plus model file validation."""

import numpy as np
import pytest

from layerlens.errors import ValidationError
from layerlens.fixture import FIXTURE_SEED, fixture_checksum
from layerlens.model import (
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    ModelSpec,
    ReLU,
    Softmax,
    backward_seeded,
    backward_to_layer,
    forward,
    load_model,
    save_model,
)
from reference_cnn import ref_forward_logits

# Values frozen from the loop-based reference implementation (see
# reference_cnn.py), computed before the engine existed:
#   predictions for img0, img1, img2 under fixture seed 7.
REFERENCE_PREDICTIONS = [1, 1, 2]
FIXTURE_SHA256 = "8af76266e14e7628c1873fcd4ad2ed563728626854eece53836ebb34cc1f12d7"


def tail_logit(model, layer_index, activation, class_index):
    """Forward from a layer's OUTPUT through the rest of the net (FD oracle)."""
    x = activation
    for layer in model.logit_layers()[layer_index + 1 :]:
        x = layer.forward(x)
    return x[class_index]


def random_tiny_cnn(seed, channels=(4, 5)):
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    layers = [
        Conv2D("conv1", rng.normal(scale=0.5, size=(c1, 2, 3, 3)), rng.normal(scale=0.3, size=c1), padding=1),
        ReLU("relu1"),
        MaxPool2D("pool1", 2, 2),
        Conv2D("conv2", rng.normal(scale=0.5, size=(c2, c1, 3, 3)), rng.normal(scale=0.3, size=c2), padding=1),
        ReLU("relu2"),
        Flatten("flatten"),
        Dense("logits", rng.normal(scale=0.4, size=(3, c2 * 16)), rng.normal(scale=0.1, size=3)),
    ]
    model = ModelSpec(input_shape=(2, 8, 8), layers=layers, class_names=["a", "b", "c"])
    image = rng.uniform(0.05, 0.95, size=(2, 8, 8))
    return model, image


def relu_and_pool_margins(model, trace):
    """Smallest distance to a ReLU or pooling decision flip."""
    margin = np.inf
    x = trace.image
    for i, layer in enumerate(model.logit_layers()):
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(x).min()))
        if isinstance(layer, MaxPool2D):
            c, h, w = x.shape
            for ci in range(c):
                for yi in range(0, h - layer.window + 1, layer.stride):
                    for xi in range(0, w - layer.window + 1, layer.stride):
                        win = np.sort(x[ci, yi : yi + layer.window, xi : xi + layer.window], axis=None)
                        margin = min(margin, float(win[-1] - win[-2]))
        x = trace.outputs[i]
    return margin


def fd_gradient(model, trace, layer_index, class_index, h=1e-5):
    base = trace.outputs[layer_index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        plus = base.copy()
        plus[idx] += h
        minus = base.copy()
        minus[idx] -= h
        grad[idx] = (
            tail_logit(model, layer_index, plus, class_index)
            - tail_logit(model, layer_index, minus, class_index)
        ) / (2 * h)
        it.iternext()
    return grad


def max_relative_error(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max())
    if scale == 0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def usable_seeds(count, start=0, margin=1e-3):
    """Deterministically pick seeds whose models sit away from kinks."""
    seeds = []
    seed = start
    while len(seeds) < count:
        model, image = random_tiny_cnn(seed)
        trace = forward(model, image)
        if relu_and_pool_margins(model, trace) > margin:
            seeds.append(seed)
        seed += 1
    return seeds


class TestForward:
    def test_zero_weight_dense_gives_bias_logits(self):
        model = ModelSpec(
            input_shape=(2,),
            layers=[Dense("d", np.zeros((2, 2)), np.array([1.0, 3.0]))],
            class_names=["x", "y"],
        )
        trace = forward(model, np.array([0.3, 0.7]))
        assert np.allclose(trace.logits, [1.0, 3.0])
        expected = np.array([1.0, np.e**2]) / (1.0 + np.e**2)
        assert np.allclose(trace.probabilities, expected, atol=1e-12)
        assert abs(trace.probabilities.sum() - 1.0) < 1e-9
        assert trace.predicted == 1

    def test_relu_gates_identity_conv(self):
        # 1x1 identity kernel then ReLU on an all-negative pre-activation
        layers = [
            Conv2D("c", np.ones((1, 1, 1, 1)), np.array([-2.0])),
            ReLU("r"),
            Flatten("f"),
            Dense("d", np.ones((2, 9)), np.zeros(2)),
        ]
        model = ModelSpec(input_shape=(1, 3, 3), layers=layers, class_names=["a", "b"])
        trace = forward(model, np.full((1, 3, 3), 1.0))
        assert np.all(trace.outputs[1] == 0.0)

    def test_shape_mismatch_rejected(self, tinynet):
        with pytest.raises(ValidationError, match="shape"):
            forward(tinynet, np.zeros((3, 8, 8)))

    def test_fixture_predictions_match_reference(self, tinynet, fixture_image_arrays):
        assert FIXTURE_SEED == 7
        for image, expected in zip(fixture_image_arrays, REFERENCE_PREDICTIONS):
            chw = np.transpose(image, (2, 0, 1))
            trace = forward(tinynet, chw)
            ref_logits = ref_forward_logits(tinynet, chw)
            assert trace.predicted == expected
            assert int(np.argmax(ref_logits)) == expected
            assert np.allclose(trace.logits, ref_logits, atol=1e-9)

    def test_forward_deterministic(self, tinynet, fixture_image_arrays):
        chw = np.transpose(fixture_image_arrays[0], (2, 0, 1))
        t1 = forward(tinynet, chw)
        t2 = forward(tinynet, chw)
        for a, b in zip(t1.outputs, t2.outputs):
            assert np.array_equal(a, b)


class TestBackward:
    def test_dense_gradient_is_weight_row(self):
        rng = np.random.default_rng(0)
        w1 = rng.normal(size=(4, 3))
        w2 = rng.normal(size=(2, 4))
        model = ModelSpec(
            input_shape=(3,),
            layers=[Dense("d1", w1, np.zeros(4)), Dense("d2", w2, np.zeros(2))],
            class_names=["a", "b"],
        )
        trace = forward(model, np.array([0.1, 0.5, 0.9]))
        grads = backward_to_layer(model, trace, 1, "d1")
        assert np.allclose(grads.gradients, w2[1], atol=1e-12)

    def test_gated_off_layer_has_zero_gradient(self):
        layers = [
            Conv2D("c1", np.ones((1, 1, 1, 1)), np.array([0.0])),
            Conv2D("c2", np.ones((1, 1, 1, 1)), np.array([-5.0])),
            ReLU("r"),
            Flatten("f"),
            Dense("d", np.ones((2, 4)), np.zeros(2)),
        ]
        model = ModelSpec(input_shape=(1, 2, 2), layers=layers, class_names=["a", "b"])
        trace = forward(model, np.full((1, 2, 2), 0.5))
        assert np.all(trace.outputs[2] == 0)  # everything below the ReLU cut
        grads = backward_to_layer(model, trace, 0, "c1")
        assert np.all(grads.gradients == 0)

    def test_unknown_layer_rejected(self, tinynet, fixture_image_arrays):
        trace = forward(tinynet, np.transpose(fixture_image_arrays[0], (2, 0, 1)))
        with pytest.raises(ValidationError, match="unknown layer"):
            backward_to_layer(tinynet, trace, 0, "nope")

    @pytest.mark.parametrize("seed", usable_seeds(3))
    def test_gradient_matches_finite_differences(self, seed):
        model, image = random_tiny_cnn(seed)
        trace = forward(model, image)
        for layer_name in ("conv1", "conv2"):
            idx = model.layer_index(layer_name)
            analytic = backward_to_layer(model, trace, 1, layer_name).gradients
            fd = fd_gradient(model, trace, idx, 1)
            assert max_relative_error(analytic, fd) < 1e-6

    def test_backward_linear_in_seed(self, tinynet, fixture_image_arrays):
        trace = forward(tinynet, np.transpose(fixture_image_arrays[1], (2, 0, 1)))
        ga = backward_to_layer(tinynet, trace, 0, "conv1").gradients
        gb = backward_to_layer(tinynet, trace, 1, "conv1").gradients
        seed = np.zeros(3)
        seed[0] = seed[1] = 1.0
        both = backward_seeded(tinynet, trace, seed, "conv1").gradients
        assert np.allclose(ga + gb, both, atol=1e-12)

    def test_maxpool_ties_route_to_first_in_scan_order(self):
        layers = [MaxPool2D("p", 2, 2), Flatten("f"), Dense("d", np.ones((2, 1)), np.zeros(2))]
        model = ModelSpec(input_shape=(1, 2, 2), layers=layers, class_names=["a", "b"])
        trace = forward(model, np.full((1, 2, 2), 0.5))
        grads = backward_to_layer(model, trace, 0, "p")
        # gradient of the pool INPUT is what the engine would route; check via
        # the layer's own backward with a tied window
        gx = model.layers[0].backward(np.ones((1, 1, 1)), np.full((1, 2, 2), 0.5))
        assert gx[0, 0, 0] == 1.0 and gx.sum() == 1.0
        assert grads.gradients.shape == (1, 1, 1)


class TestModelFiles:
    def test_identity_dense_roundtrip(self, tmp_path):
        model = ModelSpec(
            input_shape=(2,),
            layers=[Dense("d", np.eye(2), np.zeros(2))],
            class_names=["a", "b"],
        )
        save_model(model, tmp_path)
        loaded = load_model(tmp_path)
        assert len(loaded.layers) == 1
        assert loaded.logit_shape() == (2,)
        assert np.array_equal(loaded.layers[0].weights, np.eye(2))

    def test_shape_chain_mismatch_names_layer(self, tmp_path):
        model = ModelSpec(
            input_shape=(1, 4, 4),
            layers=[Flatten("flat"), Dense("head", np.zeros((2, 16)), np.zeros(2))],
            class_names=["a", "b"],
        )
        save_model(model, tmp_path)
        manifest = (tmp_path / "model.json").read_text().replace('"in_features": 16', '"in_features": 9')
        (tmp_path / "model.json").write_text(manifest)
        import numpy as _np
        from layerlens.blobs import write_blob

        write_blob(tmp_path / "head_w.f32", _np.zeros((2, 9)))
        with pytest.raises(ValidationError, match="head"):
            load_model(tmp_path)

    def test_missing_blob_names_layer(self, tmp_path):
        model = ModelSpec(
            input_shape=(2,),
            layers=[Dense("head", np.eye(2), np.zeros(2))],
            class_names=["a", "b"],
        )
        save_model(model, tmp_path)
        (tmp_path / "head_w.f32").unlink()
        with pytest.raises(ValidationError, match="head"):
            load_model(tmp_path)

    def test_non_finite_weight_rejected(self, tmp_path):
        model = ModelSpec(
            input_shape=(2,),
            layers=[Dense("head", np.eye(2), np.zeros(2))],
            class_names=["a", "b"],
        )
        save_model(model, tmp_path)
        blob = np.frombuffer((tmp_path / "head_w.f32").read_bytes(), dtype="<f4").copy()
        blob[0] = np.inf
        (tmp_path / "head_w.f32").write_bytes(blob.tobytes())
        with pytest.raises(ValidationError, match="head"):
            load_model(tmp_path)

    def test_softmax_only_terminal(self):
        with pytest.raises(ValidationError, match="softmax"):
            ModelSpec(
                input_shape=(2,),
                layers=[Softmax("s"), Dense("d", np.eye(2), np.zeros(2))],
                class_names=["a", "b"],
            )

    def test_fixture_model_structure_and_checksum(self, fixture_dir, tinynet):
        convs = [l for l in tinynet.layers if isinstance(l, Conv2D)]
        denses = [l for l in tinynet.layers if isinstance(l, Dense)]
        assert len(convs) == 2 and len(denses) == 1
        assert fixture_checksum(fixture_dir) == FIXTURE_SHA256
        recorded = (fixture_dir / "fixture.sha256").read_text().strip()
        assert recorded == FIXTURE_SHA256
