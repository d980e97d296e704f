"""Channel-then-spatial attention (CBAM form) with explicit backward."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import he_normal
from .params import ParamStore
from .tensor import (
    ConvParams,
    check_tensor,
    conv2d_bwd,
    conv2d_fwd,
    pool_backward,
    sigmoid,
)

SPATIAL_KERNEL = 7


@dataclass
class AttentionParams:
    mlp_w1: np.ndarray  # (C // r, C)
    mlp_w2: np.ndarray  # (C, C // r)
    spatial_weight: np.ndarray  # (1, 2, 7, 7)

    def __post_init__(self):
        hidden, c = self.mlp_w1.shape
        if self.mlp_w2.shape != (c, hidden):
            raise ValueError(f"mlp_w2 shape {self.mlp_w2.shape} does not mirror mlp_w1 {self.mlp_w1.shape}")
        if self.spatial_weight.shape[:2] != (1, 2):
            raise ValueError("spatial conv must map 2 pooled channels to 1 output channel")

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]

    @classmethod
    def create(cls, channels: int, reduction: int, rng=None, dtype=np.float64) -> "AttentionParams":
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction ratio {reduction} does not divide {channels} channels")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = channels // reduction
        return cls(
            he_normal(rng, (hidden, channels)).astype(dtype),
            he_normal(rng, (channels, hidden)).astype(dtype),
            he_normal(rng, (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL)).astype(dtype),
        )


def _mlp_fwd(v, p: AttentionParams):
    h = v @ p.mlp_w1.T
    r = np.maximum(h, 0)
    return r @ p.mlp_w2.T, (v, h, r)


def _mlp_bwd(g, cache, p: AttentionParams):
    v, h, r = cache
    gw2 = g.T @ r
    gh = (g @ p.mlp_w2) * (h > 0)
    gw1 = gh.T @ v
    return gh @ p.mlp_w1, gw1, gw2


def channel_attention_fwd(x, p: AttentionParams):
    check_tensor(x)
    if x.shape[1] != p.channels:
        raise ValueError(f"input has {x.shape[1]} channels, attention built for {p.channels}")
    avg = x.mean(axis=(2, 3))
    mx = x.max(axis=(2, 3))
    oa, ca = _mlp_fwd(avg, p)
    om, cm = _mlp_fwd(mx, p)
    att = sigmoid(oa + om)
    return att[:, :, None, None], (x, ca, cm, att)


def channel_attention_bwd(g, cache, p: AttentionParams):
    """``g`` is the gradient w.r.t. the (N, C, 1, 1) weights."""
    x, ca, cm, att = cache
    go = g[:, :, 0, 0] * att * (1 - att)
    gavg, gw1a, gw2a = _mlp_bwd(go, ca, p)
    gmax, gw1m, gw2m = _mlp_bwd(go, cm, p)
    gx = pool_backward(x, gavg[:, :, None, None], "global_avg")
    gx += pool_backward(x, gmax[:, :, None, None], "global_max")
    return gx, gw1a + gw1m, gw2a + gw2m


def spatial_attention_fwd(x, p: AttentionParams):
    check_tensor(x)
    pooled = np.concatenate([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    z, conv_cache = conv2d_fwd(pooled, ConvParams(p.spatial_weight, None))
    att = sigmoid(z)
    return att, (x, conv_cache, att)


def spatial_attention_bwd(g, cache):
    x, conv_cache, att = cache
    gpooled, gw, _ = conv2d_bwd(g * att * (1 - att), conv_cache)
    gx = pool_backward(x, gpooled[:, :1], "channel_avg")
    gx += pool_backward(x, gpooled[:, 1:], "channel_max")
    return gx, gw


def channel_attention(x, p: AttentionParams) -> np.ndarray:
    return channel_attention_fwd(x, p)[0]


def spatial_attention(x, p: AttentionParams) -> np.ndarray:
    return spatial_attention_fwd(x, p)[0]


def cbam_fwd(x, p: AttentionParams):
    ca, c_cache = channel_attention_fwd(x, p)
    x1 = x * ca
    sa, s_cache = spatial_attention_fwd(x1, p)
    return x1 * sa, (x, ca, x1, sa, c_cache, s_cache)


def cbam_bwd(g, cache, p: AttentionParams):
    """Return ``(grad_x, AttentionParams-shaped gradients)``."""
    x, ca, x1, sa, c_cache, s_cache = cache
    gx1 = g * sa
    gsa = (g * x1).sum(axis=1, keepdims=True)
    gx1_s, gspatial = spatial_attention_bwd(gsa, s_cache)
    gx1 += gx1_s
    gx = gx1 * ca
    gca = (gx1 * x).sum(axis=(2, 3), keepdims=True)
    gx_c, gw1, gw2 = channel_attention_bwd(gca, c_cache, p)
    gx += gx_c
    return gx, AttentionParams(gw1, gw2, gspatial)


def cbam(x, p: AttentionParams) -> np.ndarray:
    """Refine ``x`` by channel attention, then spatial attention of the result."""
    return cbam_fwd(x, p)[0]


class Cbam:
    """CBAM layer whose weights live in a ParamStore under ``<name>.*``."""

    def __init__(self, store: ParamStore, name: str, channels: int, reduction: int, rng=None):
        self.store, self.name = store, name
        self.keys = (f"{name}.mlp_w1", f"{name}.mlp_w2", f"{name}.spatial.weight")
        if self.keys[0] not in store:
            init = AttentionParams.create(channels, reduction, rng)
            store.add(self.keys[0], init.mlp_w1)
            store.add(self.keys[1], init.mlp_w2)
            store.add(self.keys[2], init.spatial_weight)
        self.cache = None

    def params(self) -> AttentionParams:
        return AttentionParams(*(self.store[k].data for k in self.keys))

    def forward(self, x, training=True):
        p = self.params()
        y, self.cache = cbam_fwd(x, p)
        return y

    def backward(self, g):
        gx, gp = cbam_bwd(g, self.cache, self.params())
        self.store.accumulate(self.keys[0], gp.mlp_w1)
        self.store.accumulate(self.keys[1], gp.mlp_w2)
        self.store.accumulate(self.keys[2], gp.spatial_weight)
        return gx
