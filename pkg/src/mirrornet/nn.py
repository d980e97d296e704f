"""Stateful layer wrappers binding tensor primitives to a ParamStore.

Each layer caches what its backward pass needs during ``forward`` and adds
parameter gradients into the store during ``backward``.
"""

from __future__ import annotations

import numpy as np

from .params import ParamStore
from .tensor import (
    BatchNormState,
    ConvParams,
    activate,
    activate_backward,
    batch_norm_bwd,
    batch_norm_fwd,
    conv2d_bwd,
    conv2d_fwd,
)


def he_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int = 3,
                 stride: int = 1, dilation: int = 1, bias: bool = True, rng=None):
        self.store, self.name = store, name
        self.stride, self.dilation = stride, dilation
        self.w = f"{name}.weight"
        self.b = f"{name}.bias" if bias else None
        if self.w not in store:
            store.add(self.w, he_normal(rng, (cout, cin, k, k)))
            if bias:
                store.add(self.b, np.zeros(cout), kind="bias")
        self.cache = None

    def params(self) -> ConvParams:
        bias = self.store[self.b].data if self.b else None
        return ConvParams(self.store[self.w].data, bias, self.stride, self.dilation)

    def forward(self, x, training=True):
        y, self.cache = conv2d_fwd(x, self.params())
        return y

    def backward(self, g):
        gx, gw, gb = conv2d_bwd(g, self.cache)
        self.store.accumulate(self.w, gw)
        if self.b:
            self.store.accumulate(self.b, gb)
        return gx


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, channels: int, momentum: float = 0.9):
        self.store, self.name, self.momentum = store, name, momentum
        if f"{name}.gamma" not in store:
            store.add(f"{name}.gamma", np.ones(channels), kind="gamma")
            store.add(f"{name}.beta", np.zeros(channels), kind="beta")
            store.add(f"{name}.running_mean", np.zeros(channels), learnable=False, kind="buffer")
            store.add(f"{name}.running_var", np.ones(channels), learnable=False, kind="buffer")
        self.cache = None

    def state(self) -> BatchNormState:
        s = self.store
        n = self.name
        return BatchNormState(s[f"{n}.gamma"].data, s[f"{n}.beta"].data,
                              s[f"{n}.running_mean"].data, s[f"{n}.running_var"].data,
                              momentum=self.momentum)

    def forward(self, x, training=True):
        y, self.cache = batch_norm_fwd(x, self.state(), training)
        return y

    def backward(self, g):
        gx, gg, gb = batch_norm_bwd(g, self.cache)
        self.store.accumulate(f"{self.name}.gamma", gg)
        self.store.accumulate(f"{self.name}.beta", gb)
        return gx


class Act:
    def __init__(self, kind: str):
        self.kind = kind
        self.out = None

    def forward(self, x, training=True):
        self.out = activate(x, self.kind)
        return self.out

    def backward(self, g):
        return activate_backward(self.out, g, self.kind)


class Sequential:
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x, training=True):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def conv_bn_relu(store, name, cin, cout, k=3, stride=1, dilation=1, rng=None) -> Sequential:
    return Sequential(
        Conv(store, f"{name}.conv", cin, cout, k, stride, dilation, rng=rng),
        BatchNorm(store, f"{name}.bn", cout),
        Act("relu"),
    )
