"""Dense NCHW tensor primitives with explicit backward passes.

Tensors are plain 4-D numpy arrays ``(N, C, H, W)``. Every differentiable
primitive comes as a ``*_fwd`` returning ``(out, cache)`` and a ``*_bwd``
consuming the cache; the convenience names (``conv2d``, ``conv2d_backward``,
...) are thin wrappers over those pairs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels

MAGIC = b"MNT1"


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def check_tensor(x: np.ndarray, name: str = "input") -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")
    return x


# ---------------------------------------------------------------- convolution


@dataclass
class ConvParams:
    weight: np.ndarray  # (C_out, C_in, kH, kW)
    bias: np.ndarray | None = None
    stride: int = 1
    dilation: int = 1
    padding: int | None = None  # None -> "same": dilation * (k // 2)

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got shape {self.weight.shape}")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be positive")
        if self.padding is None:
            self.padding = self.dilation * (self.weight.shape[2] // 2)
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match C_out={self.weight.shape[0]}"
            )


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def kernel_taps(k: int, dilation: int, padding: int) -> np.ndarray:
    """(k*k, 2) offsets of a dense k x k kernel, row-major like the weight layout."""
    r = np.arange(k) * dilation - padding
    return np.stack(np.meshgrid(r, r, indexing="ij"), -1).reshape(-1, 2).astype(np.int32)


def live_taps(taps: np.ndarray, h: int, w: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Mask of taps that read inside the input for at least one output pixel."""
    dy, dx = taps[:, 0], taps[:, 1]
    return ((dy < h) & (dy + stride * (oh - 1) >= 0)
            & (dx < w) & (dx + stride * (ow - 1) >= 0))


def taps_conv_fwd(x: np.ndarray, weight: np.ndarray, taps: np.ndarray, stride: int,
                  oh: int, ow: int, bias=None):
    """Convolution over an explicit tap list; ``weight`` is (C_out, C_in, T)."""
    n, c = x.shape[:2]
    cout = weight.shape[0]
    x_nhwc = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=weight.dtype)
    cols = kernels.im2col(x_nhwc, taps, stride, oh, ow)
    wmat = np.ascontiguousarray(weight.transpose(0, 2, 1)).reshape(cout, -1)
    y = cols @ wmat.T
    if bias is not None:
        y += bias
    y = y.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, x.shape, weight, wmat, taps, stride, oh, ow)


def taps_conv_bwd(grad_out: np.ndarray, cache, need_input_grad: bool = True):
    """Return ``(grad_input, grad_weight (C_out, C_in, T), grad_bias)``."""
    cols, (n, c, h, w), weight, wmat, taps, stride, oh, ow = cache
    cout = weight.shape[0]
    if grad_out.shape != (n, cout, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output shape {(n, cout, oh, ow)}")
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1), dtype=cols.dtype).reshape(-1, cout)
    grad_w = (g.T @ cols).reshape(cout, len(taps), c).transpose(0, 2, 1)
    grad_b = g.sum(axis=0)
    grad_x = None
    if need_input_grad:
        gcols = g @ wmat
        grad_x = kernels.col2im(gcols, n, h, w, c, taps, stride, oh, ow).transpose(0, 3, 1, 2)
        grad_x = np.ascontiguousarray(grad_x)
    return grad_x, np.ascontiguousarray(grad_w), grad_b


def conv2d_fwd(x: np.ndarray, p: ConvParams):
    check_tensor(x)
    n, c, h, w = x.shape
    cout, cin, kh, kw = p.weight.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels but weight expects C_in={cin} (weight {p.weight.shape})")
    if kh != kw:
        raise ShapeError(f"only square kernels are supported, got {kh}x{kw}")
    oh = conv_output_size(h, kh, p.stride, p.dilation, p.padding)
    ow = conv_output_size(w, kw, p.stride, p.dilation, p.padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"convolution of {h}x{w} input yields empty {oh}x{ow} output")
    taps = kernel_taps(kh, p.dilation, p.padding)
    live = live_taps(taps, h, w, p.stride, oh, ow)
    wt = p.weight.reshape(cout, cin, kh * kw)
    if not live.all():
        # taps that only ever read padding contribute exactly zero
        taps, wt = taps[live], wt[:, :, live]
    y, inner = taps_conv_fwd(x, wt, np.ascontiguousarray(taps), p.stride, oh, ow, p.bias)
    return y, (inner, live, p.weight.shape)


def conv2d_bwd(grad_out: np.ndarray, cache):
    inner, live, wshape = cache
    gx, gw, gb = taps_conv_bwd(grad_out, inner)
    if not live.all():
        full = np.zeros((wshape[0], wshape[1], live.size), dtype=gw.dtype)
        full[:, :, live] = gw
        gw = full
    return gx, gw.reshape(wshape), gb


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Dilated 2-D cross-correlation (no kernel flip)."""
    return conv2d_fwd(x, params)[0]


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    return conv2d_bwd(grad_out, conv2d_fwd(x, params)[1])


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=self.gamma.dtype)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=self.gamma.dtype)
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("batch norm momentum must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("batch norm epsilon must be positive")

    @classmethod
    def create(cls, channels: int, dtype=np.float64, **kw) -> "BatchNormState":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype), **kw)


def batch_norm_fwd(x: np.ndarray, state: BatchNormState, training: bool):
    check_tensor(x)
    n, c, h, w = x.shape
    if c != state.gamma.shape[0]:
        raise ShapeError(f"input has {c} channels, batch norm state has {state.gamma.shape[0]}")
    if n * h * w == 0:
        raise ShapeError("batch norm over an empty batch")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        # running stats keep the biased variance; no Bessel correction
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    y = xhat * state.gamma[:, None, None] + state.beta[:, None, None]
    return y.astype(x.dtype, copy=False), (xhat, inv_std, state.gamma, training)


def batch_norm_bwd(grad_out: np.ndarray, cache):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, training = cache
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gxhat = grad_out * gamma[:, None, None]
    if training:
        m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        gx = (
            gxhat
            - gxhat.sum(axis=(0, 2, 3), keepdims=True) / m
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / m
        ) * inv_std[:, None, None]
    else:
        gx = gxhat * inv_std[:, None, None]
    return gx.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


def batch_norm(x: np.ndarray, state: BatchNormState, training: bool) -> np.ndarray:
    return batch_norm_fwd(x, state, training)[0]


# ---------------------------------------------------------------- activations


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activate_backward(out: np.ndarray, grad_out: np.ndarray, kind: str) -> np.ndarray:
    """Gradient expressed through the forward *output*."""
    if kind == "relu":
        return grad_out * (out > 0)
    if kind == "sigmoid":
        return grad_out * out * (1 - out)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- pooling

POOL_KINDS = ("global_avg", "global_max", "channel_avg", "channel_max")


def pool(x: np.ndarray, kind: str) -> np.ndarray:
    check_tensor(x)
    if kind == "global_avg":
        return x.mean(axis=(2, 3), keepdims=True)
    if kind == "global_max":
        return x.max(axis=(2, 3), keepdims=True)
    if kind == "channel_avg":
        return x.mean(axis=1, keepdims=True)
    if kind == "channel_max":
        return x.max(axis=1, keepdims=True)
    raise ValueError(f"unknown pool kind {kind!r}; expected one of {POOL_KINDS}")


def pool_backward(x: np.ndarray, grad_out: np.ndarray, kind: str) -> np.ndarray:
    """Max pools route the gradient to the first maximal element."""
    n, c, h, w = x.shape
    if kind == "global_avg":
        return np.broadcast_to(grad_out / (h * w), x.shape).copy()
    if kind == "channel_avg":
        return np.broadcast_to(grad_out / c, x.shape).copy()
    if kind == "global_max":
        flat = x.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)
        g = np.zeros_like(flat)
        np.put_along_axis(g, idx[..., None], grad_out.reshape(n, c, 1), axis=2)
        return g.reshape(x.shape)
    if kind == "channel_max":
        idx = x.argmax(axis=1)[:, None]
        g = np.zeros_like(x)
        np.put_along_axis(g, idx, grad_out, axis=1)
        return g
    raise ValueError(f"unknown pool kind {kind!r}; expected one of {POOL_KINDS}")


# ---------------------------------------------------------------- resampling


@lru_cache(maxsize=128)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of half-pixel-centred linear weights."""
    a = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[i, i0] += 1.0 - lam
        a[i, i1] += lam
    a.setflags(write=False)
    return a


def upsample_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with align-corners disabled."""
    check_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"upsample target {out_h}x{out_w} must be at least 1x1")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ah = _interp_matrix(h, out_h).astype(x.dtype)
    aw = _interp_matrix(w, out_w).astype(x.dtype)
    return ah @ x @ aw.T


def upsample_bilinear_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    out_h, out_w = grad_out.shape[2:]
    if (in_h, in_w) == (out_h, out_w):
        return grad_out.copy()
    ah = _interp_matrix(in_h, out_h).astype(grad_out.dtype)
    aw = _interp_matrix(in_w, out_w).astype(grad_out.dtype)
    return ah.T @ grad_out @ aw


# ---------------------------------------------------------------- serialization


def tensor_to_bytes(x: np.ndarray) -> bytes:
    check_tensor(x)
    return MAGIC + struct.pack("<4I", *x.shape) + np.ascontiguousarray(x, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns ``(tensor, next_offset)``."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("not an MNT1 tensor (bad magic bytes)")
    shape = struct.unpack_from("<4I", buf, offset + 4)
    start = offset + 20
    count = int(np.prod(shape))
    end = start + 4 * count
    if end > len(buf):
        raise ValueError(f"truncated tensor: need {end - start} data bytes, have {len(buf) - start}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(shape)
    return data.astype(np.float32), end


def save_tensor(path, x: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    x, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return x
