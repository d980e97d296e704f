"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and results match the compiled module (``col2im`` may differ in
float summation order).
"""

import numpy as np


def _windows(taps, stride, oh, ow):
    pad = int(np.abs(taps).max(initial=0))
    spans = []
    for dy, dx in taps:
        y0, x0 = pad + dy, pad + dx
        spans.append((slice(y0, y0 + stride * (oh - 1) + 1, stride),
                      slice(x0, x0 + stride * (ow - 1) + 1, stride)))
    return pad, spans


def im2col(x, taps, stride, oh, ow):
    """``x`` is NHWC; returns (N*oh*ow, T*C), tap-major columns."""
    n, h, w, c = x.shape
    pad, spans = _windows(taps, stride, oh, ow)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, oh, ow, len(taps), c), dtype=x.dtype)
    for t, (sy, sx) in enumerate(spans):
        cols[:, :, :, t] = xp[:, sy, sx]
    return cols.reshape(n * oh * ow, len(taps) * c)


def col2im(cols, n, h, w, c, taps, stride, oh, ow):
    """Adjoint of :func:`im2col`; returns NHWC."""
    pad, spans = _windows(taps, stride, oh, ow)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    per_tap = cols.reshape(n, oh, ow, len(taps), c)
    for t, (sy, sx) in enumerate(spans):
        out[:, sy, sx] += per_tap[:, :, :, t]
    return np.ascontiguousarray(out[:, pad:pad + h, pad:pad + w])


def crf_kernel_rows(pos, rgb, r0, r1, w_app, w_smooth, theta_alpha, theta_beta, theta_gamma):
    p, c = pos[r0:r1], rgb[r0:r1]
    dp = ((p[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    dc = ((c[:, None, :] - rgb[None, :, :]) ** 2).sum(-1)
    k = w_app * np.exp(-dp / (2 * theta_alpha**2) - dc / (2 * theta_beta**2))
    k += w_smooth * np.exp(-dp / (2 * theta_gamma**2))
    k[np.arange(r1 - r0), np.arange(r0, r1)] = 0.0
    return k
