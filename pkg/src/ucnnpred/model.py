"""The base CNN, its growing subCNN prefixes, and the model file format.

A model is an ordered list of layers. Trainable layers are convolutions and
dense layers; pooling layers carry no parameters. A flatten step is implied
before the first dense layer. Optional dropout is applied (training only)
after every pooling layer and immediately before the first dense layer.
"""

import copy
import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .tensor import as_tensor

MAGIC = b"UCNN"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Bad or unreadable model payload."""


class FormatVersionError(ModelFormatError):
    pass


class TruncatedPayloadError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


@dataclass(frozen=True)
class ArchitectureConfig:
    window: int = 60
    n_features: int = 82
    # (filter_height, filter_width, out_channels) per convolution
    conv_specs: tuple = ((1, 82, 8), (3, 1, 8), (3, 1, 8))
    pool_after: tuple = (False, True, True)
    # hidden dense layer sizes between flatten and the sigmoid output
    dense_specs: tuple = ()
    dropout: float = 0.1
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "conv_specs", tuple(tuple(int(v) for v in s) for s in self.conv_specs))
        object.__setattr__(self, "pool_after", tuple(bool(p) for p in self.pool_after))
        object.__setattr__(self, "dense_specs", tuple(int(d) for d in self.dense_specs))

    @property
    def n_hidden(self):
        return len(self.conv_specs) + len(self.dense_specs)

    @property
    def max_depth(self):
        return self.n_hidden + 1

    def validate(self):
        if self.window <= 0 or self.n_features <= 0:
            raise ValueError("window and n_features must be positive")
        if not self.conv_specs:
            raise ValueError("at least one convolution is required")
        if len(self.pool_after) != len(self.conv_specs):
            raise ValueError("pool_after must have one flag per convolution")
        if self.conv_specs[0][1] != self.n_features:
            raise ValueError(
                f"first convolution width {self.conv_specs[0][1]} must equal "
                f"n_features {self.n_features}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")
        for depth in range(2, self.max_depth + 1):
            if self.flatten_size(depth) <= 0:
                raise ValueError(f"flatten size for depth {depth} is not positive")

    def conv_output_shapes(self, n_convs=None):
        """Shapes (C, H, W) after each conv (+ its pooling)."""
        n_convs = len(self.conv_specs) if n_convs is None else n_convs
        c, h, w = 1, self.window, self.n_features
        shapes = []
        for (fh, fw, oc), pool in zip(self.conv_specs[:n_convs], self.pool_after[:n_convs]):
            c, h, w = oc, h - fh + 1, w - fw + 1
            if pool:
                h //= 2
            if h <= 0 or w <= 0:
                return shapes + [(c, max(h, 0), max(w, 0))]
            shapes.append((c, h, w))
        return shapes

    def flatten_size(self, depth=None):
        """Length of the flattened conv output feeding the first dense layer."""
        depth = self.max_depth if depth is None else depth
        n_convs = min(depth - 1, len(self.conv_specs))
        shapes = self.conv_output_shapes(n_convs)
        if len(shapes) < n_convs:
            return 0
        c, h, w = shapes[-1]
        return c * h * w

    def to_dict(self):
        d = asdict(self)
        d["conv_specs"] = [list(s) for s in self.conv_specs]
        d["pool_after"] = list(self.pool_after)
        d["dense_specs"] = list(self.dense_specs)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def micro_config(window=8, n_features=4, filters=2, dropout=0.0):
    """Small architecture with the base layout, used for gradient checks."""
    return ArchitectureConfig(
        window=window,
        n_features=n_features,
        conv_specs=((1, n_features, filters), (2, 1, filters), (2, 1, filters)),
        pool_after=(False, True, True),
        dropout=dropout,
    )


@dataclass
class Model:
    config: ArchitectureConfig
    layers: list
    metadata: dict = field(default_factory=dict)

    @property
    def trainable_indices(self):
        return [i for i, layer in enumerate(self.layers) if not isinstance(layer, L.MaxPoolLayer)]

    @property
    def depth(self):
        return len(self.trainable_indices)

    @property
    def output_index(self):
        return self.trainable_indices[-1]

    def copy(self):
        return copy.deepcopy(self)

    def parameters(self, indices=None):
        """[(layer_index, weights, bias), ...] for the given trainable layers."""
        indices = self.trainable_indices if indices is None else indices
        return [(i, self.layers[i].weights, self.layers[i].bias) for i in indices]

    def _input(self, batch):
        x = as_tensor(batch)
        if x.ndim == 3:
            x = x[:, None]
        expected = (1, self.config.window, self.config.n_features)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise L.ShapeError(f"model input: expected [B, {', '.join(map(str, expected))}], got {x.shape}")
        return x

    def run(self, batch, rng=None, dropout=0.0, n_layers=None):
        """Forward pass returning (output, cache).

        With ``rng`` and ``dropout > 0`` dropout masks are sampled; otherwise
        the pass is deterministic. ``n_layers`` stops after that many layers
        and returns the raw activation (used to inspect prefixes).
        """
        x = self._input(batch)
        cache = []
        layers = self.layers if n_layers is None else self.layers[:n_layers]
        use_dropout = rng is not None and dropout > 0.0
        for idx, layer in enumerate(layers):
            entry = {"input": x}
            if isinstance(layer, L.ConvLayer):
                pre = L.conv_pre_activation(layer, x)
                entry["pre"] = pre
                x = np.maximum(pre, 0.0)
            elif isinstance(layer, L.MaxPoolLayer):
                x, entry["argmax"] = L.maxpool_apply(layer, x)
            else:
                if x.ndim > 2:
                    entry["flatten_shape"] = x.shape
                    x = x.reshape(x.shape[0], -1)
                    if use_dropout and not isinstance(self.layers[idx - 1], L.MaxPoolLayer):
                        x, entry["pre_mask"] = _dropout(x, dropout, rng)
                    entry["input"] = x
                pre = L.dense_pre_activation(layer, x)
                entry["pre"] = pre
                x = L._ACTIVATIONS[layer.activation][0](pre)
            if use_dropout and isinstance(layer, L.MaxPoolLayer):
                x, entry["mask"] = _dropout(x, dropout, rng)
            cache.append(entry)
        return x, cache

    def forward(self, batch):
        """Probability of class Up for every sample in the batch."""
        out, _ = self.run(batch)
        return out[:, 0]

    def activations(self, batch, n_layers):
        out, _ = self.run(batch, n_layers=n_layers)
        return out

    def backward(self, cache, d_output_pre, trainable=None):
        """Backpropagate the error at the output pre-activation.

        Returns {layer_index: LayerGradients} for layers in ``trainable``
        (all trainable layers by default). Propagation stops at the first
        trainable layer, so freezing a prefix also skips its cost.
        """
        trainable = set(self.trainable_indices if trainable is None else trainable)
        if not trainable:
            return {}
        first = min(trainable)
        grads = {}
        d = None
        d_pre = as_tensor(d_output_pre).reshape(-1, 1)
        for idx in range(len(cache) - 1, first - 1, -1):
            layer, entry = self.layers[idx], cache[idx]
            need_input = idx > first
            if isinstance(layer, L.MaxPoolLayer):
                if "mask" in entry:
                    d = d * entry["mask"]
                d = L.maxpool_route(layer, entry["argmax"], d, entry["input"].shape)
                continue
            if idx != self.output_index:
                d_pre = d * (entry["pre"] > 0.0)
            if isinstance(layer, L.ConvLayer):
                g = L.conv_backward_pre(layer, entry["input"], d_pre, need_input_grad=need_input)
            else:
                g = L.dense_backward_pre(layer, entry["input"], d_pre, need_input_grad=need_input)
                if need_input:
                    if "pre_mask" in entry:
                        g.d_input = g.d_input * entry["pre_mask"]
                    if "flatten_shape" in entry:
                        g.d_input = g.d_input.reshape(entry["flatten_shape"])
            if idx in trainable:
                grads[idx] = g
            d = g.d_input
        return grads


def _dropout(x, rate, rng):
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def build_subcnn(config, depth, seed):
    """Prefix of the base architecture with ``depth - 1`` hidden trainable
    layers (each conv keeps its pooling) and a fresh sigmoid output."""
    config.validate()
    if not 2 <= depth <= config.max_depth:
        raise ValueError(f"depth must be in [2, {config.max_depth}], got {depth}")
    rng = np.random.default_rng(seed)
    n_hidden = depth - 1
    n_convs = min(n_hidden, len(config.conv_specs))
    layers = []
    in_ch = 1
    for (fh, fw, oc), pool in zip(config.conv_specs[:n_convs], config.pool_after[:n_convs]):
        layers.append(L.ConvLayer.create(in_ch, oc, fh, fw, rng=rng, use_bias=config.use_bias))
        if pool:
            layers.append(L.MaxPoolLayer(2, 1))
        in_ch = oc
    size = config.flatten_size(depth)
    for units in config.dense_specs[:n_hidden - n_convs]:
        layers.append(L.DenseLayer.create(size, units, rng=rng, activation="relu", use_bias=config.use_bias))
        size = units
    layers.append(L.DenseLayer.create(size, 1, rng=rng, activation="sigmoid", use_bias=config.use_bias))
    return Model(config, layers, {"seed": int(seed), "provenance": f"init depth {depth}"})


def build_base_cnn(config, seed):
    return build_subcnn(config, config.max_depth, seed)


def transfer_prefix_weights(src, dst):
    """Copy src's trained hidden layers into the matching prefix of dst.

    dst must be exactly one trainable layer deeper. src's output layer is
    discarded; dst's deepest hidden layer and output keep their init.
    """
    src_idx, dst_idx = src.trainable_indices, dst.trainable_indices
    if len(dst_idx) != len(src_idx) + 1:
        raise ValueError(f"dst depth {len(dst_idx)} must be src depth {len(src_idx)} + 1")
    out = dst.copy()
    for n, (i, j) in enumerate(zip(src_idx[:-1], dst_idx)):
        s, d = src.layers[i], out.layers[j]
        if type(s) is not type(d) or s.weights.shape != d.weights.shape or s.bias.shape != d.bias.shape:
            raise L.ShapeError(
                f"trainable layer {n} mismatch: src {type(s).__name__}{s.weights.shape} "
                f"vs dst {type(d).__name__}{d.weights.shape}"
            )
        d.weights = s.weights.copy()
        d.bias = s.bias.copy()
    return out


# -- serialization -----------------------------------------------------------

def _layer_header(layer):
    if isinstance(layer, L.ConvLayer):
        return {"kind": "conv", "shape": list(layer.weights.shape), "use_bias": layer.use_bias}
    if isinstance(layer, L.MaxPoolLayer):
        return {"kind": "pool", "pool_height": layer.pool_height, "pool_width": layer.pool_width}
    return {
        "kind": "dense",
        "shape": list(layer.weights.shape),
        "activation": layer.activation,
        "use_bias": layer.use_bias,
    }


def serialize(model):
    """Encode a model as bytes.

    Layout (little-endian): ``b"UCNN"``, u16 version, u32 header length,
    UTF-8 JSON header, then for each trainable layer its weights followed by
    its bias as row-major float64, then a u32 CRC-32 of everything before it.
    """
    header = {
        "config": model.config.to_dict(),
        "depth": model.depth,
        "layers": [_layer_header(layer) for layer in model.layers],
        "metadata": model.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(hbytes)), hbytes]
    for layer in model.layers:
        if isinstance(layer, L.MaxPoolLayer):
            continue
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def _check_crc(data):
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumError("model payload checksum mismatch")


def deserialize(data):
    data = bytes(data)
    if len(data) < 10:
        raise TruncatedPayloadError(f"payload of {len(data)} bytes is too short for a header")
    if data[:4] != MAGIC:
        raise ModelFormatError(f"bad magic bytes {data[:4]!r}")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    if len(data) < 10 + hlen + 4:
        raise TruncatedPayloadError("payload ends inside the header")
    try:
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        _check_crc(data)
        raise ModelFormatError(f"unreadable header: {exc}") from exc
    shapes = []
    for spec in header["layers"]:
        if spec["kind"] == "pool":
            continue
        wshape = tuple(spec["shape"])
        # conv bias follows out_channels (axis 0), dense bias out_size (axis 1)
        shapes.append((wshape, (wshape[0] if spec["kind"] == "conv" else wshape[1],)))
    n_values = sum(int(np.prod(w)) + int(np.prod(b)) for w, b in shapes)
    expected = 10 + hlen + 8 * n_values + 4
    if len(data) < expected:
        raise TruncatedPayloadError(f"payload has {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise ModelFormatError(f"payload has {len(data) - expected} trailing bytes")
    _check_crc(data)

    offset = 10 + hlen
    blocks = iter(shapes)

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
        return arr

    layers = []
    for spec in header["layers"]:
        if spec["kind"] == "pool":
            layers.append(L.MaxPoolLayer(spec["pool_height"], spec["pool_width"]))
            continue
        wshape, bshape = next(blocks)
        w, b = take(wshape), take(bshape)
        if spec["kind"] == "conv":
            layers.append(L.ConvLayer(w, b, use_bias=spec["use_bias"]))
        else:
            layers.append(L.DenseLayer(w, b, activation=spec["activation"], use_bias=spec["use_bias"]))
    model = Model(ArchitectureConfig.from_dict(header["config"]), layers, header["metadata"])
    if model.depth != header["depth"]:
        raise ModelFormatError(f"header depth {header['depth']} != layer count {model.depth}")
    return model


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load_model(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def weights_digest(model, indices=None):
    """SHA-256 over the raw bytes of the selected trainable layers."""
    h = hashlib.sha256()
    for _, w, b in model.parameters(indices):
        h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return h.hexdigest()
