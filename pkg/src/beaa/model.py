"""Plaintext CNN layers with manual backprop and the optimized SqueezeNet.

Tensors are ``(M, n, H, W)`` arrays.  Every layer exposes
``forward(x, training) -> (y, cache)`` and ``backward(dy, cache) -> (dx, grads)``
so forward passes never mutate the layer; batch-norm running statistics are
updated explicitly through :meth:`Network.update_bn_stats`.
"""
from __future__ import annotations

import copy
import json
import os
from importlib import resources

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from .activation import (
    GRANULARITIES,
    PolyActivation,
    grad_coeffs,
    grad_input,
    init_coeffs,
    eval_poly,
)

ACTIVATION_KINDS = ("relu",) + GRANULARITIES


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def named_params(self):
        return list(self.params.items())

    def named_buffers(self):
        return list(self.buffers.items())

    def set_param(self, name, value):
        if name not in self.params:
            raise KeyError(name)
        self.params[name] = value

    def set_buffer(self, name, value):
        if name not in self.buffers:
            raise KeyError(name)
        self.buffers[name] = value

    def output_shape(self, shape):
        return shape

    def config(self) -> dict:
        return {"type": self.kind}

    def linear(self) -> bool:
        return True


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, weight=None, bias=None):
        super().__init__()
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride, self.padding = int(kernel), int(stride), int(padding)
        if weight is None:
            weight = np.zeros((self.out_ch, self.in_ch, self.kernel, self.kernel))
        if bias is None:
            bias = np.zeros(self.out_ch)
        self.params = {"W": np.asarray(weight), "b": np.asarray(bias)}

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} input channels, got {c}")
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {shape} too small for a {k}x{k} kernel")
        return (self.out_ch, ho, wo)

    def config(self):
        return {"type": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}

    def _cols(self, xp):
        k, s = self.kernel, self.stride
        return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x, training=False):
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        y = np.tensordot(self._cols(xp), self.params["W"], axes=([1, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]
        return np.ascontiguousarray(y), (x.shape, xp)

    def backward(self, dy, cache):
        x_shape, xp = cache
        k, s, p = self.kernel, self.stride, self.padding
        W = self.params["W"]
        cols = self._cols(xp)
        grads = {"W": np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3])),
                 "b": dy.sum(axis=(0, 2, 3))}
        # (C, k, k, M, Ho, Wo): every tap slice is contiguous
        dcols = np.tensordot(W, dy, axes=([0], [1]))
        ho, wo = dy.shape[2], dy.shape[3]
        m, c, hp, wp = xp.shape
        dxp = np.zeros((c, m, hp, wp), dtype=dcols.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
        h, w = x_shape[2], x_shape[3]
        return dxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3), grads


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, gamma=None, beta=None, mean=None, var=None):
        super().__init__()
        self.channels, self.eps = int(channels), float(eps)
        self.params = {
            "gamma": np.ones(channels) if gamma is None else np.asarray(gamma),
            "beta": np.zeros(channels) if beta is None else np.asarray(beta),
        }
        self.buffers = {
            "running_mean": np.zeros(channels) if mean is None else np.asarray(mean),
            "running_var": np.ones(channels) if var is None else np.asarray(var),
        }

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {shape[0]}")
        return shape

    def config(self):
        return {"type": self.kind, "channels": self.channels, "eps": self.eps}

    def forward(self, x, training=False):
        g = self.params["gamma"][None, :, None, None]
        b = self.params["beta"][None, :, None, None]
        if training:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        return g * xhat + b, (xhat, inv, training, mu, var)

    def backward(self, dy, cache):
        xhat, inv, training, _, _ = cache
        g = self.params["gamma"]
        grads = {"gamma": (dy * xhat).sum(axis=(0, 2, 3)), "beta": dy.sum(axis=(0, 2, 3))}
        dxhat = dy * g[None, :, None, None]
        if not training:
            return dxhat * inv[None, :, None, None], grads
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dx = (inv[None, :, None, None] / n) * (
            n * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
        return dx, grads

    def folded(self):
        """Per-channel ``(scale, shift)`` equal to this layer at inference."""
        var = self.buffers["running_var"]
        if not np.all(np.isfinite(var)) or np.any(var + self.eps <= 0):
            raise ValueError("batch-norm statistics are not frozen (invalid running_var)")
        scale = self.params["gamma"] / np.sqrt(var + self.eps)
        shift = self.params["beta"] - self.buffers["running_mean"] * scale
        return scale, shift


class Affine(Layer):
    """Per-channel ``x * scale + shift``; the inference form of batch norm."""

    kind = "affine"

    def __init__(self, channels, scale=None, shift=None):
        super().__init__()
        self.channels = int(channels)
        self.params = {
            "scale": np.ones(channels) if scale is None else np.asarray(scale),
            "shift": np.zeros(channels) if shift is None else np.asarray(shift),
        }

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeError(f"affine expects {self.channels} channels, got {shape[0]}")
        return shape

    def config(self):
        return {"type": self.kind, "channels": self.channels}

    def forward(self, x, training=False):
        s = self.params["scale"][None, :, None, None]
        return x * s + self.params["shift"][None, :, None, None], x

    def backward(self, dy, x):
        grads = {"scale": (dy * x).sum(axis=(0, 2, 3)), "shift": dy.sum(axis=(0, 2, 3))}
        return dy * self.params["scale"][None, :, None, None], grads


class ReLU(Layer):
    kind = "relu"

    def linear(self):
        return False

    def forward(self, x, training=False):
        return np.maximum(x, 0), x

    def backward(self, dy, x):
        return np.where(x > 0, dy, 0), {}


class PolyAct(Layer):
    kind = "poly"

    def __init__(self, granularity, feature_shape, coeffs=None):
        super().__init__()
        self.granularity = granularity
        self.feature_shape = tuple(int(v) for v in feature_shape)
        if coeffs is None:
            coeffs = init_coeffs(granularity, self.feature_shape)
        self.params = {"coeffs": np.asarray(coeffs)}
        self.activation  # validates shape

    @property
    def activation(self) -> PolyActivation:
        return PolyActivation(self.granularity, self.params["coeffs"])

    def linear(self):
        return False

    def output_shape(self, shape):
        if tuple(shape) != self.feature_shape:
            raise ShapeError(f"activation built for {self.feature_shape}, got {tuple(shape)}")
        return shape

    def config(self):
        return {"type": self.kind, "granularity": self.granularity,
                "feature_shape": list(self.feature_shape)}

    def forward(self, x, training=False):
        return eval_poly(self.activation, x), x

    def backward(self, dy, x):
        act = self.activation
        return grad_input(act, x, dy), {"coeffs": grad_coeffs(act, x, dy)}


class AvgPool2d(Layer):
    kind = "avgpool"

    def __init__(self, window, stride=None):
        super().__init__()
        self.window = int(window)
        self.stride = int(stride or window)
        if self.window < 1 or self.stride < 1:
            raise ValueError("invalid pooling window")

    def output_shape(self, shape):
        c, h, w = shape
        k, s = self.window, self.stride
        if h < k or w < k:
            raise ShapeError(f"pool window {k} larger than input {shape}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def config(self):
        return {"type": self.kind, "window": self.window, "stride": self.stride}

    def forward(self, x, training=False):
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win.mean(axis=(4, 5)), x.shape

    def backward(self, dy, x_shape):
        k, s = self.window, self.stride
        ho, wo = dy.shape[2], dy.shape[3]
        dx = np.zeros(x_shape, dtype=dy.dtype)
        share = dy / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += share
        return dx, {}


class GlobalAvgPool(Layer):
    """Mean over the spatial grid; output ``(M, n)``."""

    kind = "globalavgpool"

    def output_shape(self, shape):
        return (shape[0],)

    def forward(self, x, training=False):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, x_shape):
        h, w = x_shape[2], x_shape[3]
        return np.broadcast_to(dy[:, :, None, None] / (h * w), x_shape).copy(), {}


def _run_forward(children, x, training):
    caches = []
    for _, layer in children:
        x, c = layer.forward(x, training)
        caches.append(c)
    return x, caches


def _run_backward(children, dy, caches, prefix=""):
    grads = {}
    for (name, layer), c in zip(reversed(children), reversed(caches)):
        dy, g = layer.backward(dy, c)
        for k, v in g.items():
            grads[f"{prefix}{name}.{k}"] = v
    return dy, grads


class Fire(Layer):
    """Squeeze (1x1 conv) then parallel 1x1 and 3x3 expands, concatenated.

    ``squeeze`` and ``post`` hold the squeeze conv and the
    activation/normalization layers that follow each stage.
    """

    kind = "fire"

    def __init__(self, squeeze, expand1x1: Conv2d, expand3x3: Conv2d, post):
        super().__init__()
        self.squeeze = list(squeeze)
        self.expand1x1 = expand1x1
        self.expand3x3 = expand3x3
        self.post = list(post)
        if expand1x1.in_ch != expand3x3.in_ch:
            raise ShapeError("expand branches must share the squeeze output")

    @property
    def out_channels(self):
        return self.expand1x1.out_ch + self.expand3x3.out_ch

    def children(self):
        return self.squeeze + [("expand1x1", self.expand1x1), ("expand3x3", self.expand3x3)] + self.post

    def _child(self, name):
        for n, layer in self.children():
            if n == name:
                return layer
        raise KeyError(name)

    def named_params(self):
        return [(f"{n}.{k}", v) for n, layer in self.children() for k, v in layer.named_params()]

    def named_buffers(self):
        return [(f"{n}.{k}", v) for n, layer in self.children() for k, v in layer.named_buffers()]

    def set_param(self, name, value):
        child, rest = name.split(".", 1)
        self._child(child).set_param(rest, value)

    def set_buffer(self, name, value):
        child, rest = name.split(".", 1)
        self._child(child).set_buffer(rest, value)

    def linear(self):
        return all(layer.linear() for _, layer in self.children())

    def output_shape(self, shape):
        for _, layer in self.squeeze:
            shape = layer.output_shape(shape)
        a = self.expand1x1.output_shape(shape)
        b = self.expand3x3.output_shape(shape)
        if a[1:] != b[1:]:
            raise ShapeError("expand branches produce different spatial sizes")
        shape = (a[0] + b[0],) + a[1:]
        for _, layer in self.post:
            shape = layer.output_shape(shape)
        return shape

    def config(self):
        return {"type": self.kind,
                "squeeze": [[n, layer_config(l)] for n, l in self.squeeze],
                "expand1x1": layer_config(self.expand1x1),
                "expand3x3": layer_config(self.expand3x3),
                "post": [[n, layer_config(l)] for n, l in self.post]}

    def forward(self, x, training=False):
        s, c_sq = _run_forward(self.squeeze, x, training)
        a, c_a = self.expand1x1.forward(s, training)
        b, c_b = self.expand3x3.forward(s, training)
        y, c_post = _run_forward(self.post, np.concatenate([a, b], axis=1), training)
        return y, (c_sq, c_a, c_b, c_post, a.shape[1])

    def backward(self, dy, cache):
        c_sq, c_a, c_b, c_post, split = cache
        dy, grads = _run_backward(self.post, dy, c_post)
        da, ga = self.expand1x1.backward(dy[:, :split], c_a)
        db, gb = self.expand3x3.backward(dy[:, split:], c_b)
        grads.update({f"expand1x1.{k}": v for k, v in ga.items()})
        grads.update({f"expand3x3.{k}": v for k, v in gb.items()})
        dx, gs = _run_backward(self.squeeze, da + db, c_sq)
        grads.update(gs)
        return dx, grads


def layer_config(layer: Layer) -> dict:
    return layer.config()


def layer_from_config(cfg: dict) -> Layer:
    t = cfg["type"]
    if t == "conv":
        return Conv2d(cfg["in_ch"], cfg["out_ch"], cfg["kernel"], cfg["stride"], cfg["padding"])
    if t == "batchnorm":
        return BatchNorm2d(cfg["channels"], cfg["eps"])
    if t == "affine":
        return Affine(cfg["channels"])
    if t == "relu":
        return ReLU()
    if t == "poly":
        return PolyAct(cfg["granularity"], cfg["feature_shape"])
    if t == "avgpool":
        return AvgPool2d(cfg["window"], cfg["stride"])
    if t == "globalavgpool":
        return GlobalAvgPool()
    if t == "fire":
        return Fire([(n, layer_from_config(c)) for n, c in cfg["squeeze"]],
                    layer_from_config(cfg["expand1x1"]), layer_from_config(cfg["expand3x3"]),
                    [(n, layer_from_config(c)) for n, c in cfg["post"]])
    raise ValueError(f"unknown layer type {t!r}")


class Network:
    """Ordered named layers plus the module grouping used for reporting."""

    def __init__(self, layers, input_shape, num_classes, modules=None, activation=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        self.modules = modules or [(n, type(l).__name__, [n]) for n, l in self.layers]
        self.activation = activation
        names = [n for n, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.shapes()

    def __getitem__(self, name) -> Layer:
        for n, layer in self.layers:
            if n == name:
                return layer
        raise KeyError(name)

    def shapes(self) -> list[tuple]:
        """Input shape of every layer followed by the output shape."""
        shape = self.input_shape
        out = [shape]
        for name, layer in self.layers:
            try:
                shape = tuple(layer.output_shape(shape))
            except ShapeError as exc:
                raise ShapeError(f"layer {name!r}: {exc}") from None
            out.append(shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"network output {shape} does not match {self.num_classes} classes")
        return out

    def module_counts(self) -> dict:
        counts = {}
        for _, kind, _ in self.modules:
            counts[kind] = counts.get(kind, 0) + 1
        return counts

    def parameters(self) -> dict:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.named_params()}

    def buffers(self) -> dict:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.named_buffers()}

    def set_parameters(self, values: dict) -> None:
        for key, v in values.items():
            name, rest = key.split(".", 1)
            self[name].set_param(rest, v)

    def set_buffers(self, values: dict) -> None:
        for key, v in values.items():
            name, rest = key.split(".", 1)
            self[name].set_buffer(rest, v)

    def forward(self, x, training=False):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input (M, {self.input_shape}), got {x.shape}")
        return _run_forward(self.layers, x, training)

    def backward(self, dlogits, caches) -> dict:
        _, grads = _run_backward(self.layers, dlogits, caches)
        return grads

    def update_bn_stats(self, caches, momentum=0.1) -> None:
        """Blend batch statistics recorded by a training forward into the running ones."""

        def visit(children, cs):
            for (_, layer), c in zip(children, cs):
                if isinstance(layer, BatchNorm2d) and c[2]:
                    _, _, _, mu, var = c
                    b = layer.buffers
                    b["running_mean"] = (1 - momentum) * b["running_mean"] + momentum * mu
                    b["running_var"] = (1 - momentum) * b["running_var"] + momentum * var
                elif isinstance(layer, Fire):
                    c_sq, _, _, c_post, _ = c
                    visit(layer.squeeze, c_sq)
                    visit(layer.post, c_post)

        visit(self.layers, caches)

    def astype(self, dtype) -> "Network":
        net = self.copy()
        net.set_parameters({k: v.astype(dtype) for k, v in net.parameters().items()})
        net.set_buffers({k: v.astype(dtype) for k, v in net.buffers().items()})
        return net

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def topology(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "activation": self.activation,
            "modules": [[n, k, list(ls)] for n, k, ls in self.modules],
            "layers": [[n, layer_config(layer)] for n, layer in self.layers],
        }

    @classmethod
    def from_topology(cls, topo: dict) -> "Network":
        layers = [(n, layer_from_config(c)) for n, c in topo["layers"]]
        return cls(layers, topo["input_shape"], topo["num_classes"],
                   [(n, k, ls) for n, k, ls in topo["modules"]], topo.get("activation"))


def forward_plain(net: Network, batch, training=False):
    """Logits ``(M, num_classes)`` and the per-layer caches for backprop."""
    return net.forward(batch, training)


def avg_pool(t, window, stride=None):
    """Average pooling of an ``(n, H, W)`` or ``(M, n, H, W)`` tensor."""
    t = np.asarray(t, dtype=np.float64)
    squeeze = t.ndim == 3
    x = t[None] if squeeze else t
    AvgPool2d(window, stride).output_shape(x.shape[1:])
    y, _ = AvgPool2d(window, stride).forward(x)
    return y[0] if squeeze else y


def global_avg_pool(t):
    t = np.asarray(t, dtype=np.float64)
    return t.mean(axis=(-2, -1))


def _init_conv(rng, in_ch, out_ch, k, stride=1, padding=0):
    std = np.sqrt(2.0 / (in_ch * k * k))
    w = rng.normal(0.0, std, size=(out_ch, in_ch, k, k))
    return Conv2d(in_ch, out_ch, k, stride, padding, w, np.zeros(out_ch))


def _make_act(kind, shape, rng, coeff_noise):
    if kind == "relu":
        return ReLU()
    return PolyAct(kind, shape, init_coeffs(kind, shape, coeff_noise, rng))


def load_topology_config(path=None) -> dict:
    """Topology JSON from a file path, a packaged config name, or a dict."""
    if path is None:
        path = "squeezenet_opt"
    if isinstance(path, dict):
        return path
    packaged = resources.files("beaa.configs").joinpath(f"{path}.json")
    if not os.path.exists(path) and packaged.is_file():
        return json.loads(packaged.read_text())
    with open(path) as fh:
        return json.load(fh)


def build_squeezenet_opt(num_classes=10, input_shape=(3, 32, 32), activation="element",
                         config=None, seed=0, coeff_noise=0.0) -> Network:
    """Optimized SqueezeNet from a module list (see ``configs/squeezenet_opt.json``).

    Conv modules are conv -> activation -> batch norm.  Fire modules apply an
    activation and batch norm after the squeeze conv and after the concat.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if activation not in ACTIVATION_KINDS:
        raise ValueError(f"activation must be one of {ACTIVATION_KINDS}")
    cfg = load_topology_config(config)
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers, modules = [], []

    def add(name, layer):
        nonlocal shape
        try:
            shape = tuple(layer.output_shape(shape))
        except ShapeError as exc:
            raise ShapeError(f"{name}: {exc}") from None
        layers.append((name, layer))
        return name

    for m in cfg["modules"]:
        name, kind = m["name"], m["type"]
        if kind == "Conv":
            out = num_classes if m["out_channels"] == "num_classes" else int(m["out_channels"])
            k = int(m["kernel"])
            names = [add(name, _init_conv(rng, shape[0], out, k, m.get("stride", 1), m.get("padding", 0)))]
            names.append(add(f"{name}_act", _make_act(activation, shape, rng, coeff_noise)))
            names.append(add(f"{name}_bn", BatchNorm2d(shape[0])))
        elif kind == "Pool":
            if m.get("global"):
                names = [add(name, GlobalAvgPool())]
            else:
                names = [add(name, AvgPool2d(m["window"], m.get("stride", m["window"])))]
        elif kind == "Fire":
            c, h, w = shape
            sq = int(m["squeeze"])
            e1, e3 = int(m["expand1x1"]), int(m["expand3x3"])
            squeeze = [("squeeze", _init_conv(rng, c, sq, 1)),
                       ("squeeze_act", _make_act(activation, (sq, h, w), rng, coeff_noise)),
                       ("squeeze_bn", BatchNorm2d(sq))]
            post = [("act", _make_act(activation, (e1 + e3, h, w), rng, coeff_noise)),
                    ("bn", BatchNorm2d(e1 + e3))]
            fire = Fire(squeeze, _init_conv(rng, sq, e1, 1), _init_conv(rng, sq, e3, 3, 1, 1), post)
            names = [add(name, fire)]
        else:
            raise ValueError(f"unknown module type {kind!r}")
        modules.append((name, kind, names))
    return Network(layers, input_shape, num_classes, modules, activation)


def build_sequential(input_shape, num_classes, blocks, activation="element", seed=0,
                     coeff_noise=0.0, weight_scale=1.0, batchnorm=False) -> Network:
    """Small conv nets for tests and benchmarks.

    ``blocks`` entries: ``("conv", out, kernel, padding)``, ``("act",)``,
    ``("bn",)``, ``("pool", window)`` or ``("gap",)``.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []
    counts = {}
    for blk in blocks:
        t = blk[0]
        counts[t] = counts.get(t, 0) + 1
        name = f"{t}{counts[t]}"
        if t == "conv":
            _, out, k, pad = blk
            layer = _init_conv(rng, shape[0], out, k, 1, pad)
            layer.params["W"] = layer.params["W"] * weight_scale
            layer.params["b"] = rng.normal(0.0, 0.1, size=out) if weight_scale else layer.params["b"]
        elif t == "act":
            layer = _make_act(activation, shape, rng, coeff_noise)
        elif t == "bn":
            layer = BatchNorm2d(shape[0])
        elif t == "pool":
            layer = AvgPool2d(blk[1])
        elif t == "gap":
            layer = GlobalAvgPool()
        else:
            raise ValueError(f"unknown block {t!r}")
        shape = tuple(layer.output_shape(shape))
        layers.append((name, layer))
    return Network(layers, input_shape, num_classes, activation=activation)


def fold_batchnorm(net: Network) -> Network:
    """Replace every batch norm by its inference-time per-channel affine map."""

    def fold(children):
        out = []
        for name, layer in children:
            if isinstance(layer, BatchNorm2d):
                scale, shift = layer.folded()
                out.append((name, Affine(layer.channels, scale, shift)))
            elif isinstance(layer, Fire):
                out.append((name, Fire(fold(layer.squeeze), copy.deepcopy(layer.expand1x1),
                                       copy.deepcopy(layer.expand3x3), fold(layer.post))))
            else:
                out.append((name, copy.deepcopy(layer)))
        return out

    return Network(fold(net.layers), net.input_shape, net.num_classes,
                   copy.deepcopy(net.modules), net.activation)


def has_batchnorm(net: Network) -> bool:
    def visit(children):
        for _, layer in children:
            if isinstance(layer, BatchNorm2d):
                return True
            if isinstance(layer, Fire) and (visit(layer.squeeze) or visit(layer.post)):
                return True
        return False

    return visit(net.layers)


def save_model(path, net: Network, extra_meta: dict | None = None) -> None:
    """Topology as JSON header, parameters and buffers as float32 blobs."""
    arrays = {f"param:{k}": v.astype("<f4") for k, v in net.parameters().items()}
    arrays.update({f"buffer:{k}": v.astype("<f4") for k, v in net.buffers().items()})
    meta = {"topology": net.topology()}
    meta.update(extra_meta or {})
    container.save(path, "model", meta, arrays)


def load_model(path, dtype=np.float64) -> Network:
    _, meta, arrays = container.load(path, "model")
    net = Network.from_topology(meta["topology"])
    params = {k[6:]: v.astype(dtype) for k, v in arrays.items() if k.startswith("param:")}
    bufs = {k[7:]: v.astype(dtype) for k, v in arrays.items() if k.startswith("buffer:")}
    expected = set(net.parameters())
    if set(params) != expected:
        raise ValueError(f"model file parameters do not match topology: "
                         f"missing {sorted(expected - set(params))}")
    net.set_parameters(params)
    net.set_buffers(bufs)
    return net
