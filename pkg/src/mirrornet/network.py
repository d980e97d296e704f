"""MirrorNet assembly: plain-CNN backbone, per-level CCFE, coarse-to-fine gating."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ccfe import CcfeModule, block_dilations
from .nn import Conv, Sequential, conv_bn_relu
from .params import ParamStore
from .tensor import (
    ShapeError,
    check_tensor,
    sigmoid,
    upsample_bilinear,
    upsample_bilinear_backward,
)


class ConfigError(ValueError):
    """A configuration invariant does not hold."""


@dataclass
class NetworkConfig:
    resolution: int = 64
    widths: tuple = (16, 32, 64, 128)
    stem_stride: int = 2
    ccfe_blocks: int = 4
    ccfe_scales: int = 4
    contrast: bool = True
    use_ccfe: bool = True
    reduction: int = 4
    supervision: int = 4
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    @property
    def downsample(self) -> int:
        """Total stride between the input and the deepest side output."""
        return self.stem_stride * 2 ** (self.supervision - 1)

    def validate(self) -> None:
        s = self.supervision
        if s < 1:
            raise ConfigError("supervision count must be at least 1")
        if len(self.widths) != s:
            raise ConfigError(f"supervision={s} needs {s} backbone widths, got {len(self.widths)}")
        if len(self.loss_weights) != s:
            raise ConfigError(f"supervision={s} needs {s} loss weights, got {len(self.loss_weights)}")
        if self.stem_stride not in (1, 2):
            raise ConfigError(f"stem_stride must be 1 or 2, got {self.stem_stride}")
        if self.reduction < 1:
            raise ConfigError("attention reduction ratio must be positive")
        for w in self.widths:
            if w < 4 or w % 4:
                raise ConfigError(f"width {w} is not divisible by 4")
            if w % self.reduction:
                raise ConfigError(f"width {w} is not divisible by reduction ratio {self.reduction}")
            if self.use_ccfe and (w // 4 * self.ccfe_scales) % self.reduction:
                raise ConfigError(
                    f"CCFE concat width {w // 4 * self.ccfe_scales} at width {w} "
                    f"is not divisible by reduction ratio {self.reduction}")
        if self.use_ccfe:
            if self.ccfe_blocks < 1:
                raise ConfigError("ccfe_blocks must be at least 1")
            block_dilations(self.ccfe_scales)
        if self.resolution < 1 or self.resolution % self.downsample:
            raise ConfigError(
                f"resolution {self.resolution} is not divisible by {self.downsample} "
                f"(stem_stride * 2^(supervision-1))")


class MirrorNet:
    """Layer graph bound to a ParamStore.

    ``forward`` returns the ``S`` side-output logit maps, each upsampled to
    the input size; index 0 is the finest level and the final prediction.
    """

    def __init__(self, config: NetworkConfig, store: ParamStore, rng=None):
        config.validate()
        self.config, self.store = config, store
        w = config.widths
        self.stages = []
        cin = 3
        for k, c in enumerate(w):
            stride = config.stem_stride if k == 0 else 2
            self.stages.append(Sequential(
                conv_bn_relu(store, f"fen.stage{k}.conv0", cin, c, 3, stride=stride, rng=rng),
                conv_bn_relu(store, f"fen.stage{k}.conv1", c, c, 3, rng=rng),
            ))
            cin = c
        self.ccfe = []
        self.heads = []
        for k, c in enumerate(w):
            if config.use_ccfe:
                self.ccfe.append(CcfeModule(
                    store, f"ccfe{k}", c, c, config.ccfe_blocks,
                    block_dilations(config.ccfe_scales), config.reduction, config.contrast, rng))
            else:
                self.ccfe.append(None)
            self.heads.append(Conv(store, f"head{k}", c, 1, k=1, rng=rng))
        self._cache = None

    # The gate form F * sigmoid(up(map)) lives only in these two methods.
    @staticmethod
    def _gate_fwd(feat, lower_map):
        up = upsample_bilinear(lower_map, *feat.shape[2:])
        gate = sigmoid(up)
        return feat * gate, gate

    @staticmethod
    def _gate_bwd(g, feat, gate, lower_shape):
        gfeat = g * gate
        ggate = (g * feat).sum(axis=1, keepdims=True) * gate * (1 - gate)
        return gfeat, upsample_bilinear_backward(ggate, *lower_shape[2:])

    def forward(self, image, training=False):
        check_tensor(image, "image")
        cfg = self.config
        n, c, h, w = image.shape
        if c != 3:
            raise ShapeError(f"image must have 3 channels, got {c}")
        if h % cfg.downsample or w % cfg.downsample:
            raise ShapeError(f"image size {h}x{w} is not divisible by {cfg.downsample}")
        image = image.astype(self.store.dtype, copy=False)
        feats = []
        x = image
        for stage in self.stages:
            x = stage.forward(x, training)
            feats.append(x)
        s = len(feats)
        maps = [None] * s
        gates = [None] * s
        for k in reversed(range(s)):
            f = feats[k]
            if k < s - 1:
                f, gates[k] = self._gate_fwd(f, maps[k + 1])
            if self.ccfe[k] is not None:
                f = self.ccfe[k].forward(f, training)
            maps[k] = self.heads[k].forward(f, training)
        self._cache = (feats, gates, [m.shape for m in maps], (h, w))
        return [upsample_bilinear(m, h, w) for m in maps]

    def backward(self, grads):
        """Backpropagate per-level output gradients; returns the image gradient."""
        feats, gates, map_shapes, (h, w) = self._cache
        s = len(feats)
        gmaps = [upsample_bilinear_backward(g, *map_shapes[k][2:]) for k, g in enumerate(grads)]
        gfeats = [None] * s
        # finest level first: level k adds its gate gradient to map k + 1
        for k in range(s):
            g = self.heads[k].backward(gmaps[k])
            if self.ccfe[k] is not None:
                g = self.ccfe[k].backward(g)
            if k < s - 1:
                g, glower = self._gate_bwd(g, feats[k], gates[k], map_shapes[k + 1])
                gmaps[k + 1] = gmaps[k + 1] + glower
            gfeats[k] = g
        carry = None
        for k in reversed(range(s)):
            g = gfeats[k] if carry is None else gfeats[k] + carry
            carry = self.stages[k].backward(g)
        return carry


def build_network(config: NetworkConfig, dtype=np.float32) -> ParamStore:
    """Fresh, seeded parameters for ``config``."""
    config.validate()
    store = ParamStore(dtype)
    MirrorNet(config, store, np.random.default_rng(config.seed))
    return store


def forward(image, params: ParamStore, config: NetworkConfig, training=False):
    return MirrorNet(config, params).forward(image, training)


def predict(image, params: ParamStore, config: NetworkConfig, threshold=0.5, crf=None):
    """Binary mask from the finest map; ``crf`` is an optional CrfParams."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    prob = sigmoid(forward(image, params, config)[0].astype(np.float64))[:, 0]
    if crf is not None:
        from .crf import crf_refine

        prob = np.stack([crf_refine(img, p, crf) for img, p in zip(image, prob)])
    return (prob >= threshold).astype(np.uint8)
