"""Layer vocabulary, model specs, flat parameter vectors and forward passes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, Tensor


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int
    s: int = 1
    p: int = 0

    def __post_init__(self):
        if self.k < 1 or self.s < 1 or self.p < 0 or self.c_in < 1 or self.c_out < 1:
            raise ValueError(f"invalid convolution geometry {self}")


@dataclass(frozen=True)
class Conv:
    spec: ConvSpec
    kind = "conv"


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int
    # image shape to restore after the product; set on layers lifted from convs
    out_shape: tuple | None = None
    kind = "dense"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2
    kind = "maxpool"


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.0
    kind = "dropout"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


def conv_output_dim(d_in, spec, layer=None):
    """Spatial output size ``(d_in + 2p - k) / s + 1`` of a convolution."""
    span = d_in + 2 * spec.p - spec.k
    where = f" (layer {layer})" if layer is not None else ""
    if span < 0:
        raise ShapeError(f"filter of size {spec.k} does not fit input of size {d_in}{where}")
    if span % spec.s:
        raise ShapeError(f"stride {spec.s} does not divide {d_in}+2*{spec.p}-{spec.k}={span}{where}")
    return span // spec.s + 1


@dataclass(frozen=True)
class Segment:
    name: str
    layer: int
    offset: int
    length: int
    shape: tuple


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple
    classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = self.shapes()
        if shapes[-1] != (self.classes,):
            raise ShapeError(f"model ends in shape {shapes[-1]}, expected ({self.classes},)")

    def shapes(self):
        """Static per-example shape after each layer, starting with the input."""
        out = [self.input_shape]
        cur = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                sp = layer.spec
                if len(cur) != 3 or cur[0] != sp.c_in:
                    raise ShapeError(f"layer {i}: conv expects ({sp.c_in}, H, W), got {cur}")
                cur = (sp.c_out, conv_output_dim(cur[1], sp, i), conv_output_dim(cur[2], sp, i))
            elif isinstance(layer, Dense):
                if math.prod(cur) != layer.n_in:
                    raise ShapeError(f"layer {i}: dense expects {layer.n_in} inputs, got shape {cur}")
                cur = tuple(layer.out_shape) if layer.out_shape else (layer.n_out,)
                if math.prod(cur) != layer.n_out:
                    raise ShapeError(f"layer {i}: out_shape {cur} does not hold {layer.n_out} units")
            elif isinstance(layer, MaxPool):
                if len(cur) != 3:
                    raise ShapeError(f"layer {i}: maxpool expects an image, got {cur}")
                c, h, w = cur
                if (h - layer.window) % layer.stride or (w - layer.window) % layer.stride:
                    raise ShapeError(f"layer {i}: pooling {layer} does not tile {h}x{w}")
                cur = (c, (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1)
            elif isinstance(layer, Flatten):
                cur = (math.prod(cur),)
            elif not isinstance(layer, (ReLU, Dropout)):
                raise TypeError(f"unknown layer {layer!r}")
            out.append(cur)
        return out

    def segments(self):
        segs = []
        off = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                sp = layer.spec
                shapes = [(sp.c_out, sp.c_in, sp.k, sp.k), (sp.c_out,)]
            elif isinstance(layer, Dense):
                shapes = [(layer.n_out, layer.n_in), (layer.n_out,)]
            else:
                continue
            for name, shp in zip(("weight", "bias"), shapes):
                n = math.prod(shp)
                segs.append(Segment(f"{i}.{name}", i, off, n, shp))
                off += n
        return tuple(segs)

    @property
    def num_params(self):
        return sum(s.length for s in self.segments())

    def to_dict(self):
        layers = []
        for layer in self.layers:
            d = {"kind": layer.kind}
            if isinstance(layer, Conv):
                d.update(vars(layer.spec))
            elif isinstance(layer, Dense):
                d.update(n_in=layer.n_in, n_out=layer.n_out,
                         out_shape=list(layer.out_shape) if layer.out_shape else None)
            elif isinstance(layer, MaxPool):
                d.update(window=layer.window, stride=layer.stride)
            elif isinstance(layer, Dropout):
                d.update(rate=layer.rate)
            layers.append(d)
        return {"input_shape": list(self.input_shape), "classes": self.classes, "layers": layers}

    @classmethod
    def from_dict(cls, d):
        layers = []
        for ld in d["layers"]:
            kind = ld["kind"]
            if kind == "conv":
                layers.append(Conv(ConvSpec(ld["c_in"], ld["c_out"], ld["k"], ld["s"], ld["p"])))
            elif kind == "dense":
                out_shape = tuple(ld["out_shape"]) if ld.get("out_shape") else None
                layers.append(Dense(ld["n_in"], ld["n_out"], out_shape))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "maxpool":
                layers.append(MaxPool(ld["window"], ld["stride"]))
            elif kind == "dropout":
                layers.append(Dropout(ld["rate"]))
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return cls(tuple(d["input_shape"]), tuple(layers), d["classes"])


@dataclass
class ParamVector:
    """Flat parameter array with a segment table describing each tensor."""

    data: np.ndarray
    segments: tuple = field(default=())

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.segments:
            end = 0
            for s in self.segments:
                if s.offset != end:
                    raise ValueError("segment table does not tile the parameter vector")
                end += s.length
            if end != self.data.size:
                raise ValueError(f"segments cover {end} entries, vector has {self.data.size}")

    @classmethod
    def zeros(cls, model, dtype=np.float32):
        return cls(np.zeros(model.num_params, dtype=dtype), model.segments())

    def __len__(self):
        return self.data.size

    def with_data(self, values):
        return ParamVector(np.asarray(values), self.segments)

    def copy(self):
        return ParamVector(self.data.copy(), self.segments)

    def astype(self, dtype):
        return ParamVector(self.data.astype(dtype), self.segments)

    def segment(self, name):
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def view(self, name):
        s = self.segment(name)
        return self.data[s.offset:s.offset + s.length].reshape(s.shape)

    def norm(self):
        return float(np.linalg.norm(self.data.astype(np.float64)))


def _layer_params(theta, segs, i):
    """Weight and bias tensors of layer ``i`` out of the flat leaf tensor."""
    w, b = segs[f"{i}.weight"], segs[f"{i}.bias"]
    return (T.segment(theta, w.offset, w.length, w.shape),
            T.segment(theta, b.offset, b.length, b.shape))


def _as_leaf(theta):
    if isinstance(theta, Tensor):
        return theta
    return Tensor(getattr(theta, "data", theta))


def forward(model, theta, x, training=False, rng=None, trace=None):
    """Logits of shape (N, classes).

    ``theta`` may be a ``ParamVector``, a flat array or a flat leaf tensor
    (the last when differentiating).  Dropout is only active with
    ``training=True``.  If ``trace`` is a list, every layer output is
    appended to it.
    """
    leaf = _as_leaf(theta)
    if leaf.shape != (model.num_params,):
        raise ShapeError(f"parameter vector has shape {leaf.shape}, model needs ({model.num_params},)")
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=leaf.dtype))
    if h.shape[1:] != model.input_shape:
        raise ShapeError(f"input has shape {h.shape[1:]}, expected {model.input_shape}")
    segs = {s.name: s for s in model.segments()}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv):
            w, b = _layer_params(leaf, segs, i)
            h = T.conv2d(h, w, b, layer.spec.s, layer.spec.p)
        elif isinstance(layer, Dense):
            w, b = _layer_params(leaf, segs, i)
            h = T.dense(h, w, b)
            if layer.out_shape:
                h = T.reshape(h, (h.shape[0], *layer.out_shape))
        elif isinstance(layer, ReLU):
            h = T.relu(h)
        elif isinstance(layer, MaxPool):
            h = T.maxpool2d(h, layer.window, layer.stride)
        elif isinstance(layer, Dropout):
            if training and layer.rate > 0:
                if rng is None:
                    raise ValueError("dropout in training mode needs a generator")
                h = T.dropout(h, layer.rate, rng)
        elif isinstance(layer, Flatten):
            h = T.reshape(h, (h.shape[0], -1))
        if trace is not None:
            trace.append(h)
    return h


def _first_bad_layer(trace):
    for i, h in enumerate(trace):
        if not np.all(np.isfinite(h.data)):
            return i
    return None


def loss(model, theta, batch, training=False, rng=None):
    """Mean softmax cross-entropy over ``batch = (images, labels)``."""
    x, y = batch
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= model.classes):
        raise ValueError(f"labels must lie in [0, {model.classes})")
    trace = []
    logits = forward(model, theta, x, training=training, rng=rng, trace=trace)
    out = T.softmax_cross_entropy(logits, y)
    if not np.isfinite(out.data):
        layer = _first_bad_layer(trace)
        raise NonFiniteError(f"non-finite loss (first bad layer: {layer})", layer)
    return out


def loss_fn(model, training=False, rng=None):
    """Adapter giving ``f(theta, batch)`` for :func:`efcn.tensor.grad`."""
    return lambda theta, batch: loss(model, theta, batch, training=training, rng=rng)


def init_params(model, seed, dtype=np.float32):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    theta = ParamVector.zeros(model, dtype)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv):
            fan_in = layer.spec.c_in * layer.spec.k ** 2
        elif isinstance(layer, Dense):
            fan_in = layer.n_in
        else:
            continue
        bound = 1.0 / math.sqrt(fan_in)
        for name in ("weight", "bias"):
            s = theta.segment(f"{i}.{name}")
            theta.data[s.offset:s.offset + s.length] = rng.uniform(-bound, bound, s.length)
    return theta


def build_vanilla_cnn(channels, image_shape, classes, dropout=0.0):
    """Three conv(3x3, pad 1)+ReLU+maxpool(2) blocks, then one dense head."""
    c, h, w = image_shape
    if h % 8 or w % 8:
        raise ShapeError(f"image side must be divisible by 8, got {h}x{w}")
    layers = []
    c_in = c
    for _ in range(3):
        layers += [Conv(ConvSpec(c_in, channels, 3, 1, 1)), ReLU(), MaxPool(2, 2)]
        if dropout:
            layers.append(Dropout(dropout))
        c_in = channels
    layers += [Flatten(), Dense(channels * (h // 8) * (w // 8), classes)]
    return ModelSpec((c, h, w), tuple(layers), classes)


def build_fcn_from(cnn_spec):
    """Same architecture with every convolution replaced by a dense layer."""
    shapes = cnn_spec.shapes()
    layers = []
    for i, layer in enumerate(cnn_spec.layers):
        if isinstance(layer, Conv):
            n_in = math.prod(shapes[i])
            out = shapes[i + 1]
            layers.append(Dense(n_in, math.prod(out), tuple(out)))
        else:
            layers.append(layer)
    return replace(cnn_spec, layers=tuple(layers))


def is_dense_only(model):
    return not any(isinstance(l, Conv) for l in model.layers)
