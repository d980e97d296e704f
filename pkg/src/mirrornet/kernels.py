"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy fallback
is used. Set ``MIRRORNET_BACKEND=python`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("MIRRORNET_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def im2col(x, taps, stride, oh, ow):
    """Patch matrix (N*oh*ow, T*C) of NHWC ``x`` for ``taps``, a (T, 2) int32 array of (dy, dx)."""
    return _impl.im2col(x, taps, stride, oh, ow)


def col2im(cols, n, h, w, c, taps, stride, oh, ow):
    """Adjoint of :func:`im2col`: scatter-add patch rows back to NHWC (N, H, W, C)."""
    return _impl.col2im(cols, n, h, w, c, taps, stride, oh, ow)


def crf_kernel_rows(pos, rgb, r0, r1, w_app, w_smooth, theta_alpha, theta_beta, theta_gamma):
    """Rows ``r0:r1`` of the dense two-Gaussian pairwise kernel (zero diagonal)."""
    return _impl.crf_kernel_rows(
        pos, rgb, int(r0), int(r1), float(w_app), float(w_smooth),
        float(theta_alpha), float(theta_beta), float(theta_gamma),
    )
