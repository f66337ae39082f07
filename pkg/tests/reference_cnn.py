"""Independent naive CNN forward pass used as an oracle in tests.

Written against the documented file conventions only (cross-correlation,
zero padding, first-max pooling); deliberately loop-based and separate from
the engine under test.
"""

import numpy as np


def ref_conv2d(x, weights, bias, stride, padding):
    oc, ic, kh, kw = weights.shape
    c, h, w = x.shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    xp[:, padding : padding + h, padding : padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((oc, oh, ow))
    for o in range(oc):
        for i in range(oh):
            for j in range(ow):
                acc = bias[o]
                for ci in range(ic):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc += weights[o, ci, ky, kx] * xp[ci, i * stride + ky, j * stride + kx]
                out[o, i, j] = acc
    return out


def ref_maxpool(x, window, stride):
    c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((c, oh, ow))
    for ci in range(c):
        for i in range(oh):
            for j in range(ow):
                best = -np.inf
                for ky in range(window):
                    for kx in range(window):
                        best = max(best, x[ci, i * stride + ky, j * stride + kx])
                out[ci, i, j] = best
    return out


def ref_forward_logits(model, image):
    """Forward through a ModelSpec using only its layer parameters."""
    from layerlens.model import Conv2D, Dense, Flatten, MaxPool2D, ReLU, Softmax

    x = np.asarray(image, dtype=np.float64)
    for layer in model.layers:
        if isinstance(layer, Conv2D):
            x = ref_conv2d(x, layer.weights, layer.bias, layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            x = np.where(x > 0, x, 0.0)
        elif isinstance(layer, MaxPool2D):
            x = ref_maxpool(x, layer.window, layer.stride)
        elif isinstance(layer, Flatten):
            x = x.reshape(-1)
        elif isinstance(layer, Dense):
            out = np.zeros(layer.weights.shape[0])
            for o in range(layer.weights.shape[0]):
                out[o] = layer.bias[o] + float(np.dot(layer.weights[o], x))
            x = out
        elif isinstance(layer, Softmax):
            return x  # logits are the softmax input
        else:
            raise AssertionError(f"unexpected layer {type(layer)}")
    return x
