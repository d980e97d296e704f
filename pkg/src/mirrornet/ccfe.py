"""Contextual contrasted feature extraction.

A block runs parallel branches, each subtracting a dilated "context"
convolution from a plain 3x3 "local" convolution of the same input, then
concatenates the branch contrasts, normalizes, and refines them with
attention. A module chains blocks and fuses all block outputs.
"""

from __future__ import annotations

import numpy as np

from .attention import Cbam
from .nn import Act, BatchNorm, Conv, Sequential, conv_bn_relu
from .params import ParamStore
from .tensor import (
    ConvParams,
    ShapeError,
    conv2d,
    kernel_taps,
    live_taps,
    taps_conv_bwd,
    taps_conv_fwd,
)

DILATIONS = (2, 4, 8, 16)


def contextual_contrast(x: np.ndarray, local: ConvParams, context: ConvParams) -> np.ndarray:
    """``local(x) - context(x)`` on raw convolution outputs."""
    a = conv2d(x, local)
    b = conv2d(x, context)
    if a.shape != b.shape:
        raise ShapeError(f"local branch gives {a.shape} but context branch gives {b.shape}")
    return a - b


class CcfeBlock:
    """Parallel contrast branches -> concat -> BN/relu -> attention -> 1x1 projection.

    Each branch maps ``cin`` to ``cin // 4`` channels; the projection returns
    the block to ``cin`` channels so blocks chain at constant width. With
    ``contrast=False`` the branches emit the context convolution alone and no
    local convolutions exist.
    """

    def __init__(self, store: ParamStore, name: str, cin: int, dilations=DILATIONS,
                 reduction: int = 4, contrast: bool = True, rng=None):
        if cin % 4:
            raise ValueError(f"CCFE input width {cin} is not divisible by 4")
        self.store, self.name = store, name
        self.cin, self.cb = cin, cin // 4
        self.dilations = tuple(dilations)
        self.contrast = contrast
        self.local = []
        self.context = []
        for k, d in enumerate(self.dilations):
            if contrast:
                self.local.append(Conv(store, f"{name}.branch{k}.local", cin, self.cb, 3, rng=rng))
            self.context.append(
                Conv(store, f"{name}.branch{k}.context", cin, self.cb, 3, dilation=d, rng=rng))
        width = self.cb * len(self.dilations)
        self.post = Sequential(
            BatchNorm(store, f"{name}.bn", width),
            Act("relu"),
            Cbam(store, f"{name}.att", width, reduction, rng=rng),
            conv_bn_relu(store, f"{name}.proj", width, cin, k=1, rng=rng),
        )
        self._layouts = {}
        self._cache = None

    @property
    def concat_width(self) -> int:
        return self.cb * len(self.dilations)

    def _layout(self, h: int, w: int):
        """Union tap list of all branch convolutions, pruned for an h x w input.

        Returns ``(taps, live, local_idx, context_idx)``; the index arrays
        address the unpruned union.
        """
        key = (h, w)
        if key in self._layouts:
            return self._layouts[key]
        index: dict = {}

        def place(taps):
            return np.array([index.setdefault(tuple(t), len(index)) for t in taps])

        local_idx = place(kernel_taps(3, 1, 1)) if self.contrast else None
        context_idx = [place(kernel_taps(3, d, d)) for d in self.dilations]
        taps = np.array(list(index), dtype=np.int32).reshape(-1, 2)
        live = live_taps(taps, h, w, 1, h, w)
        self._layouts[key] = (taps, live, local_idx, context_idx)
        return self._layouts[key]

    def contrast_features(self, x, training=True):
        """All branch contrasts as one convolution over the union of their taps.

        ``local(x) - context(x)`` is linear in the weights, so each branch's
        two kernels fold into one signed kernel on the shared tap list.
        """
        s, cb = self.store, self.cb
        taps, live, local_idx, context_idx = self._layout(*x.shape[2:])
        cin = x.shape[1]
        weight = np.zeros((self.concat_width, cin, len(taps)), dtype=s.dtype)
        bias = np.zeros(self.concat_width, dtype=s.dtype)
        sign = -1.0 if self.contrast else 1.0
        for k, conv in enumerate(self.context):
            rows = slice(k * cb, (k + 1) * cb)
            if self.contrast:
                loc = self.local[k]
                weight[rows][:, :, local_idx] += s[loc.w].data.reshape(cb, cin, 9)
                bias[rows] += s[loc.b].data
            weight[rows][:, :, context_idx[k]] += sign * s[conv.w].data.reshape(cb, cin, 9)
            bias[rows] += sign * s[conv.b].data
        y, self._cache = taps_conv_fwd(
            x, np.ascontiguousarray(weight[:, :, live]), np.ascontiguousarray(taps[live]),
            1, x.shape[2], x.shape[3], bias)
        return y

    def contrast_backward(self, g):
        s, cb = self.store, self.cb
        taps, live, local_idx, context_idx = self._layout(*g.shape[2:])
        gx, gw_live, gb = taps_conv_bwd(g, self._cache)
        gw = np.zeros(gw_live.shape[:2] + (len(taps),), dtype=gw_live.dtype)
        gw[:, :, live] = gw_live
        sign = -1.0 if self.contrast else 1.0
        for k, conv in enumerate(self.context):
            rows = slice(k * cb, (k + 1) * cb)
            if self.contrast:
                loc = self.local[k]
                s.accumulate(loc.w, gw[rows][:, :, local_idx])
                s.accumulate(loc.b, gb[rows])
            s.accumulate(conv.w, sign * gw[rows][:, :, context_idx[k]])
            s.accumulate(conv.b, sign * gb[rows])
        return gx

    def forward(self, x, training=True):
        return self.post.forward(self.contrast_features(x, training), training)

    def backward(self, g):
        return self.contrast_backward(self.post.backward(g))


class CcfeModule:
    """Chained CCFE blocks; block outputs are concatenated, attended, fused by 1x1 conv."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, n_blocks: int = 4,
                 dilations=DILATIONS, reduction: int = 4, contrast: bool = True, rng=None):
        if n_blocks < 1:
            raise ValueError("a CCFE module needs at least one block")
        self.blocks = [
            CcfeBlock(store, f"{name}.block{i}", cin, dilations, reduction, contrast, rng)
            for i in range(n_blocks)
        ]
        self.cin = cin
        self.fuse = Sequential(
            Cbam(store, f"{name}.fuse_att", n_blocks * cin, reduction, rng=rng),
            conv_bn_relu(store, f"{name}.fuse", n_blocks * cin, cout, k=1, rng=rng),
        )

    def forward(self, x, training=True):
        outs = []
        for block in self.blocks:
            x = block.forward(x, training)
            outs.append(x)
        return self.fuse.forward(np.concatenate(outs, axis=1), training)

    def backward(self, g):
        gcat = self.fuse.backward(g)
        c = self.cin
        carry = None
        for i in reversed(range(len(self.blocks))):
            gi = gcat[:, i * c:(i + 1) * c]
            if carry is not None:
                gi = gi + carry
            carry = self.blocks[i].backward(gi)
        return carry


def block_dilations(scales: int) -> tuple:
    if not 1 <= scales <= len(DILATIONS):
        raise ValueError(f"scales per block must be in 1..{len(DILATIONS)}, got {scales}")
    return DILATIONS[:scales]
