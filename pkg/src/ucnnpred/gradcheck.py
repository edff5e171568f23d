"""Finite-difference checks of the analytic model gradients.

ReLU and max pooling are not differentiable at ties. ``is_smooth`` detects
batches that sit within a margin of a kink so checks can skip them instead of
reporting spurious mismatches.
"""

import numpy as np

from . import layers as L
from .optim import bce_loss, output_error


def total_loss(model, X, y):
    return float(np.sum(bce_loss(model.forward(X), y)))


def analytic_gradients(model, X, y):
    out, cache = model.run(X)
    grads = model.backward(cache, output_error(out[:, 0], y))
    return {i: (g.d_weights, g.d_bias) for i, g in grads.items()}


def numeric_gradients(model, X, y, h=1e-5):
    """Central differences of the summed BCE loss for every parameter."""
    out = {}
    for i, w, b in model.parameters():
        grads = []
        for arr in (w, b):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = total_loss(model, X, y)
                arr[idx] = orig - h
                down = total_loss(model, X, y)
                arr[idx] = orig
                g[idx] = (up - down) / (2 * h)
            grads.append(g)
        out[i] = tuple(grads)
    return out


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def is_smooth(model, X, margin=1e-3):
    """True when no ReLU input and no pooling-window gap is within ``margin``.

    Perturbing a parameter by h moves every pre-activation by far less than
    the margin, so the loss is smooth over the finite-difference stencil.
    """
    _, cache = model.run(X)
    for layer, entry in zip(model.layers, cache):
        if isinstance(layer, L.MaxPoolLayer):
            x = entry["input"]
            ph = layer.pool_height
            h = (x.shape[2] // ph) * ph
            win = np.sort(x[:, :, :h].reshape(x.shape[0], x.shape[1], h // ph, ph, x.shape[3]), axis=3)
            top, second = win[:, :, :, -1], win[:, :, :, -2]
            # ties between dead units stay ties under small perturbations
            if np.any((top - second < margin) & (top > 0.0)):
                return False
        elif "pre" in entry and layer is not model.layers[model.output_index]:
            if np.min(np.abs(entry["pre"])) < margin:
                return False
    return True


def max_gradient_error(model, X, y, h=1e-5):
    """Worst relative error over every weight and bias array."""
    ana = analytic_gradients(model, X, y)
    num = numeric_gradients(model, X, y, h)
    return max(max(relative_error(ana[i][k], num[i][k]) for k in (0, 1)) for i in ana)
