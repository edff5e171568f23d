"""Dense float64 array helpers and elementwise activations.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Everything here is pure: inputs are never modified.
"""

import numpy as np

DTYPE = np.float64

_ONE_BELOW = np.nextafter(1.0, 0.0)
_TINY = np.finfo(DTYPE).tiny


def as_tensor(x):
    """Return ``x`` as a contiguous float64 array (copying only if needed)."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def relu(t):
    t = as_tensor(t)
    return np.maximum(t, 0.0)


def relu_grad(t):
    """Derivative of relu; defined as 0 at exactly 0."""
    t = as_tensor(t)
    return (t > 0.0).astype(DTYPE)


def sigmoid(t):
    """Logistic function evaluated without overflow.

    Uses exp(-|x|) on both branches, and keeps results strictly inside
    (0, 1) even where float64 would round to an endpoint.
    """
    t = as_tensor(t)
    e = np.exp(-np.abs(t))
    out = np.where(t >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(out, _TINY, _ONE_BELOW)


def sigmoid_grad(t):
    s = sigmoid(t)
    return s * (1.0 - s)
