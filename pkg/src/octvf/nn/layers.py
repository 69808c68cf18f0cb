"""Stateful layer wrappers around :mod:`octvf.nn.ops`.

A layer owns its parameters (``params``), their gradients (``grads``) and
non-trainable state (``buffers``); ``forward`` caches what ``backward``
needs, so a layer instance handles one forward/backward pair at a time.
"""

from __future__ import annotations

import numpy as np

from . import ops


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, cin, cout, k, stride=1, padding="same", bias=False, rng=None,
                 dtype=np.float32, gain=2.0):
        super().__init__()
        self.stride, self.padding = stride, padding
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(gain / (cin * k * k))
        self.params["w"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        if bias:
            self.params["b"] = np.zeros(cout, dtype=dtype)

    def forward(self, x, train=False):
        out, cache = ops.conv2d_forward(x, self.params["w"], self.stride, self.padding)
        if "b" in self.params:
            out = out + self.params["b"][None, :, None, None]
        self._cache = cache
        return out

    def backward(self, dout):
        dx, dw = ops.conv2d_backward(dout, self._cache)
        self.grads["w"] = dw
        if "b" in self.params:
            self.grads["b"] = dout.sum(axis=(0, 2, 3))
        return dx


class SeparableConv2D(Layer):
    def __init__(self, cin, cout, k=3, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["depthwise"] = (rng.standard_normal((cin, k, k)) * np.sqrt(2.0 / (k * k))).astype(dtype)
        self.params["pointwise"] = (rng.standard_normal((cout, cin)) * np.sqrt(2.0 / cin)).astype(dtype)

    def forward(self, x, train=False):
        out, self._cache = ops.separable_forward(x, self.params["depthwise"], self.params["pointwise"])
        return out

    def backward(self, dout):
        dx, ddw, dpw = ops.separable_backward(dout, self._cache)
        self.grads["depthwise"], self.grads["pointwise"] = ddw, dpw
        return dx


class BatchNorm(Layer):
    def __init__(self, c, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)

    def forward(self, x, train=False):
        out, self._cache = ops.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            "train" if train else "infer", self.momentum, self.eps,
        )
        return out

    def backward(self, dout):
        dx, self.grads["gamma"], self.grads["beta"] = ops.batchnorm_backward(dout, self._cache)
        return dx


class ReLU(Layer):
    def forward(self, x, train=False):
        out, self._cache = ops.relu_forward(x)
        return out

    def backward(self, dout):
        return ops.relu_backward(dout, self._cache)


class MaxPool(Layer):
    def __init__(self, k=3, stride=2, padding="same"):
        super().__init__()
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, x, train=False):
        out, self._cache = ops.maxpool_forward(x, self.k, self.stride, self.padding)
        return out

    def backward(self, dout):
        return ops.maxpool_backward(dout, self._cache)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        out, self._cache = ops.global_avg_pool_forward(x)
        return out

    def backward(self, dout):
        return ops.global_avg_pool_backward(dout, self._cache)


class Sequential(Layer):
    def __init__(self, layers: list[tuple[str, Layer]]):
        super().__init__()
        self.layers = layers

    def children(self):
        return self.layers

    def forward(self, x, train=False):
        for name, layer in self.layers:
            x = layer.forward(x, train)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite activation after layer {name!r}")
        return x

    def backward(self, dout):
        for _, layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


class SeparableBlock(Layer):
    """ReLU-SepConv-BN-ReLU-SepConv-BN[-MaxPool], plus an optional projected shortcut.

    When pooling, the shortcut is a strided 1x1 convolution followed by batch
    norm; otherwise it is a plain 1x1 convolution.
    """

    def __init__(self, cin, cout, pool=True, residual=True, rng=None, dtype=np.float32,
                 momentum=0.9, eps=1e-5):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        main = [
            ("relu1", ReLU()),
            ("sep1", SeparableConv2D(cin, cout, 3, rng, dtype)),
            ("bn1", BatchNorm(cout, momentum, eps, dtype)),
            ("relu2", ReLU()),
            ("sep2", SeparableConv2D(cout, cout, 3, rng, dtype)),
            ("bn2", BatchNorm(cout, momentum, eps, dtype)),
        ]
        if pool:
            main.append(("pool", MaxPool(3, 2, "same")))
        self.main = Sequential(main)
        self.shortcut = None
        if residual:
            sc = [("conv", Conv2D(cin, cout, 1, 2 if pool else 1, "same", rng=rng, dtype=dtype))]
            if pool:
                sc.append(("bn", BatchNorm(cout, momentum, eps, dtype)))
            self.shortcut = Sequential(sc)

    def children(self):
        out = [("main", self.main)]
        if self.shortcut is not None:
            out.append(("shortcut", self.shortcut))
        return out

    def forward(self, x, train=False):
        y = self.main.forward(x, train)
        if self.shortcut is not None:
            y = y + self.shortcut.forward(x, train)
        return y

    def backward(self, dout):
        dx = self.main.backward(dout)
        if self.shortcut is not None:
            dx = dx + self.shortcut.backward(dout)
        return dx


def named_arrays(layer: Layer, kind: str, prefix: str = "") -> list[tuple[str, Layer, str]]:
    """Depth-first (qualified name, owning layer, key) for ``params`` or ``buffers``."""
    out = [(f"{prefix}{k}", layer, k) for k in getattr(layer, kind)]
    for name, child in layer.children():
        out.extend(named_arrays(child, kind, f"{prefix}{name}."))
    return out
