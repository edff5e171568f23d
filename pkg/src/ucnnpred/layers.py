"""Convolution, max-pooling and fully connected layers with manual backprop.

Every forward/backward function accepts either a single sample or a batch
with a leading batch axis:

    conv:  [C, H, W]   or [B, C, H, W]
    pool:  [C, H, W]   or [B, C, H, W]
    dense: [in_size]   or [B, in_size]

Parameter gradients are *summed* over the batch; averaging is left to the
optimizer.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import as_tensor, relu, relu_grad, sigmoid, sigmoid_grad


class ShapeError(ValueError):
    """Raised when an array does not have the shape a layer expects."""


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ConvLayer:
    """Valid (unpadded, stride 1) 2-D convolution followed by ReLU.

    ``weights`` has shape [out_channels, in_channels, filter_height,
    filter_width]; ``bias`` has shape [out_channels].
    """

    weights: np.ndarray
    bias: np.ndarray
    use_bias: bool = True

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(
                f"conv bias: expected shape ({self.out_channels},), got {self.bias.shape}"
            )

    @classmethod
    def create(cls, in_channels, out_channels, filter_height, filter_width,
               rng=None, use_bias=True):
        shape = (out_channels, in_channels, filter_height, filter_width)
        if rng is None:
            weights = np.zeros(shape)
        else:
            area = filter_height * filter_width
            weights = glorot_uniform(rng, shape, in_channels * area, out_channels * area)
        return cls(weights, np.zeros(out_channels), use_bias=use_bias)

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def filter_height(self):
        return self.weights.shape[2]

    @property
    def filter_width(self):
        return self.weights.shape[3]

    def output_shape(self, height, width):
        return self.out_channels, height - self.filter_height + 1, width - self.filter_width + 1

    def params(self):
        return [self.weights, self.bias]


@dataclass
class MaxPoolLayer:
    """Non-overlapping max pooling. Trailing rows/cols that do not fill a
    window are dropped; ties go to the first index in the window."""

    pool_height: int = 2
    pool_width: int = 1
    argmax: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    input_shape: Optional[tuple] = field(default=None, repr=False, compare=False)

    def output_shape(self, channels, height, width):
        return channels, height // self.pool_height, width // self.pool_width

    def params(self):
        return []


@dataclass
class DenseLayer:
    """Fully connected layer; ``weights`` is [in_size, out_size]."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    use_bias: bool = True

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.weights.ndim != 2:
            raise ShapeError(f"dense weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.out_size,):
            raise ShapeError(f"dense bias: expected shape ({self.out_size},), got {self.bias.shape}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def create(cls, in_size, out_size, rng=None, activation="relu", use_bias=True):
        if rng is None:
            weights = np.zeros((in_size, out_size))
        else:
            weights = glorot_uniform(rng, (in_size, out_size), in_size, out_size)
        return cls(weights, np.zeros(out_size), activation=activation, use_bias=use_bias)

    @property
    def in_size(self):
        return self.weights.shape[0]

    @property
    def out_size(self):
        return self.weights.shape[1]

    def params(self):
        return [self.weights, self.bias]


@dataclass
class LayerGradients:
    d_weights: Optional[np.ndarray]
    d_bias: Optional[np.ndarray]
    d_input: Optional[np.ndarray]


_ACTIVATIONS = {
    "relu": (relu, relu_grad),
    "sigmoid": (sigmoid, sigmoid_grad),
}


def _batched(x, ndim):
    """Promote a single sample to a batch of one. Returns (array, was_single)."""
    x = as_tensor(x)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected a {ndim}-D sample or {ndim + 1}-D batch, got shape {x.shape}")


def _unbatch(x, single):
    return x[0] if single else x


# -- convolution -------------------------------------------------------------

def _check_conv_input(layer, x):
    _, c, h, w = x.shape
    if c != layer.in_channels:
        raise ShapeError(f"conv input channels: expected {layer.in_channels}, got {c}")
    if h < layer.filter_height or w < layer.filter_width:
        raise ShapeError(
            f"conv input {h}x{w} smaller than filter "
            f"{layer.filter_height}x{layer.filter_width}"
        )


def conv_pre_activation(layer, x):
    """Batched valid convolution plus bias, without activation.

    Accumulates channel-outer, filter-row, filter-column-inner so every
    output element is summed in the same order as a naive triple loop.
    """
    _check_conv_input(layer, x)
    b = x.shape[0]
    _, ho, wo = layer.output_shape(x.shape[2], x.shape[3])
    w = layer.weights
    acc = np.zeros((b, layer.out_channels, ho, wo))
    for c in range(layer.in_channels):
        for k in range(layer.filter_height):
            for m in range(layer.filter_width):
                acc += w[:, c, k, m][None, :, None, None] * x[:, c, None, k:k + ho, m:m + wo]
    if layer.use_bias:
        acc += layer.bias[None, :, None, None]
    return acc


def conv_forward(layer, x):
    """Return ``(pre_act, act)`` for a sample [C,H,W] or batch [B,C,H,W]."""
    xb, single = _batched(x, 3)
    pre = conv_pre_activation(layer, xb)
    return _unbatch(pre, single), _unbatch(relu(pre), single)


def conv_backward_pre(layer, x, d_pre, need_input_grad=True):
    """Gradients given the error at the pre-activation (ReLU mask applied)."""
    _check_conv_input(layer, x)
    _, ho, wo = layer.output_shape(x.shape[2], x.shape[3])
    if d_pre.shape != (x.shape[0], layer.out_channels, ho, wo):
        raise ShapeError(
            f"conv upstream gradient: expected {(x.shape[0], layer.out_channels, ho, wo)}, "
            f"got {d_pre.shape}"
        )
    fh, fw = layer.filter_height, layer.filter_width
    # windows[b, c, i, j, k, m] = x[b, c, i + k, j + m]
    windows = sliding_window_view(x, (fh, fw), axis=(2, 3))
    d_weights = np.tensordot(d_pre, windows, axes=([0, 2, 3], [0, 2, 3]))
    d_bias = d_pre.sum(axis=(0, 2, 3)) if layer.use_bias else np.zeros_like(layer.bias)
    d_input = None
    if need_input_grad:
        d_input = np.zeros_like(x)
        for k in range(fh):
            for m in range(fw):
                # [B, Ho, Wo, C] -> [B, C, Ho, Wo]
                contrib = np.tensordot(d_pre, layer.weights[:, :, k, m], axes=([1], [0]))
                d_input[:, :, k:k + ho, m:m + wo] += contrib.transpose(0, 3, 1, 2)
    return LayerGradients(d_weights, d_bias, d_input)


def conv_backward(layer, x, pre_act, d_output):
    xb, single = _batched(x, 3)
    pre = as_tensor(pre_act)
    d_out = as_tensor(d_output)
    if single:
        pre, d_out = pre[None], d_out[None]
    if pre.shape != d_out.shape:
        raise ShapeError(f"conv pre_act shape {pre.shape} != d_output shape {d_out.shape}")
    grads = conv_backward_pre(layer, xb, d_out * relu_grad(pre))
    grads.d_input = _unbatch(grads.d_input, single)
    return grads


# -- max pooling -------------------------------------------------------------

def _pool_windows(layer, x):
    b, c, h, w = x.shape
    ph, pw = layer.pool_height, layer.pool_width
    ho, wo = h // ph, w // pw
    trimmed = x[:, :, :ho * ph, :wo * pw]
    # [B, C, Ho, ph, Wo, pw] -> [B, C, Ho, Wo, ph*pw]
    win = trimmed.reshape(b, c, ho, ph, wo, pw).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(b, c, ho, wo, ph * pw)


def maxpool_apply(layer, x):
    """Batched pooling that returns ``(output, argmax)`` without touching the
    layer's cache (safe for concurrent inference)."""
    if x.shape[2] < layer.pool_height or x.shape[3] < layer.pool_width:
        raise ShapeError(
            f"pool input {x.shape[2]}x{x.shape[3]} smaller than window "
            f"{layer.pool_height}x{layer.pool_width}"
        )
    win = _pool_windows(layer, x)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_route(layer, argmax, d_output, input_shape):
    """Send each upstream gradient to the input cell that won its window."""
    b, c, h, w = input_shape
    ph, pw = layer.pool_height, layer.pool_width
    ho, wo = h // ph, w // pw
    if d_output.shape != (b, c, ho, wo):
        raise ShapeError(f"pool upstream gradient: expected {(b, c, ho, wo)}, got {d_output.shape}")
    win = np.zeros((b, c, ho, wo, ph * pw))
    np.put_along_axis(win, argmax[..., None], d_output[..., None], axis=-1)
    win = win.reshape(b, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
    d_input = np.zeros(input_shape)
    d_input[:, :, :ho * ph, :wo * pw] = win.reshape(b, c, ho * ph, wo * pw)
    return d_input


def maxpool_forward(layer, x):
    xb, single = _batched(x, 3)
    out, idx = maxpool_apply(layer, xb)
    layer.argmax = idx
    layer.input_shape = (xb.shape, single)
    return _unbatch(out, single)


def maxpool_backward(layer, d_output):
    if layer.argmax is None:
        raise RuntimeError("maxpool_backward called before any forward pass")
    shape, single = layer.input_shape
    d_out = as_tensor(d_output)
    if single:
        d_out = d_out[None]
    return _unbatch(maxpool_route(layer, layer.argmax, d_out, shape), single)


# -- fully connected ---------------------------------------------------------

def dense_pre_activation(layer, x):
    if x.shape[-1] != layer.in_size:
        raise ShapeError(f"dense input length: expected {layer.in_size}, got {x.shape[-1]}")
    pre = x @ layer.weights
    if layer.use_bias:
        pre = pre + layer.bias
    return pre


def dense_forward(layer, x):
    xb, single = _batched(x, 1)
    pre = dense_pre_activation(layer, xb)
    act = _ACTIVATIONS[layer.activation][0](pre)
    return _unbatch(pre, single), _unbatch(act, single)


def dense_backward_pre(layer, x, d_pre, need_input_grad=True):
    if d_pre.shape != (x.shape[0], layer.out_size):
        raise ShapeError(
            f"dense upstream gradient: expected {(x.shape[0], layer.out_size)}, got {d_pre.shape}"
        )
    d_weights = x.T @ d_pre
    d_bias = d_pre.sum(axis=0) if layer.use_bias else np.zeros_like(layer.bias)
    d_input = d_pre @ layer.weights.T if need_input_grad else None
    return LayerGradients(d_weights, d_bias, d_input)


def dense_backward(layer, x, pre_act, d_output):
    xb, single = _batched(x, 1)
    pre = as_tensor(pre_act)
    d_out = as_tensor(d_output)
    if single:
        pre, d_out = pre[None], d_out[None]
    if xb.shape[-1] != layer.in_size:
        raise ShapeError(f"dense input length: expected {layer.in_size}, got {xb.shape[-1]}")
    if pre.shape != d_out.shape:
        raise ShapeError(f"dense pre_act shape {pre.shape} != d_output shape {d_out.shape}")
    d_pre = _ACTIVATIONS[layer.activation][1](pre) * d_out
    grads = dense_backward_pre(layer, xb, d_pre)
    grads.d_input = _unbatch(grads.d_input, single)
    return grads
