"""Fully-connected two-label CRF refinement by mean-field inference.

Pairwise energy is Potts with kernel
``k(i, j) = w_a exp(-|p_i - p_j|^2 / 2ta^2 - |I_i - I_j|^2 / 2tb^2) + w_s exp(-|p_i - p_j|^2 / 2tg^2)``
over pixel positions ``p`` (pixels) and colours ``I`` (8-bit units).
Messages are exact dense sums, no lattice approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

PROB_CLIP = 1e-5
#: Above this many pixels the kernel matrix is streamed in row blocks.
DENSE_LIMIT = 64 * 64
ROW_BLOCK = 1024


@dataclass
class CrfParams:
    w_appearance: float = 4.0
    w_smoothness: float = 3.0
    theta_alpha: float = 30.0
    theta_beta: float = 13.0
    theta_gamma: float = 3.0
    iterations: int = 10

    def validate(self) -> None:
        if self.w_appearance < 0 or self.w_smoothness < 0:
            raise ValueError("CRF kernel weights must be non-negative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("CRF bandwidths must be positive")
        if self.iterations < 0:
            raise ValueError("CRF iterations must be non-negative")


def _features(image: np.ndarray):
    image = np.asarray(image)
    img = image.astype(np.float64)
    if img.ndim != 3 or 3 not in (img.shape[0], img.shape[2]):
        raise ValueError(f"expected an RGB image, got shape {image.shape}")
    if img.shape[2] != 3:
        img = img.transpose(1, 2, 0)
    if np.issubdtype(image.dtype, np.floating):
        img = img * 255.0  # float tensors are in [0, 1]; kernels use 8-bit units
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([yy.ravel(), xx.ravel()], 1).astype(np.float64)
    return pos, np.ascontiguousarray(img.reshape(-1, 3)), (h, w)


def pairwise_kernel(image: np.ndarray, params: CrfParams) -> np.ndarray:
    """Full (N, N) kernel matrix with zero diagonal."""
    pos, rgb, _ = _features(image)
    return kernels.crf_kernel_rows(pos, rgb, 0, len(pos), params.w_appearance,
                                   params.w_smoothness, params.theta_alpha,
                                   params.theta_beta, params.theta_gamma)


def crf_refine(image: np.ndarray, prob: np.ndarray, params: CrfParams | None = None) -> np.ndarray:
    """Refined mirror marginal, same shape as ``prob``.

    ``image`` is (H, W, 3) or (3, H, W); integer images are 8-bit valued,
    float images lie in [0, 1].
    """
    params = params or CrfParams()
    params.validate()
    prob = np.asarray(prob, dtype=np.float64)
    pos, rgb, (h, w) = _features(image)
    if prob.shape != (h, w):
        raise ValueError(f"probability map {prob.shape} does not match image {(h, w)}")
    p = np.clip(prob, PROB_CLIP, 1.0 - PROB_CLIP)
    # the unary softmax of (-log p, -log(1-p)) is p itself
    if params.iterations == 0 or (params.w_appearance == 0 and params.w_smoothness == 0):
        return p
    unary = np.stack([-np.log1p(-p.ravel()), -np.log(p.ravel())], 1)  # labels: 0 bg, 1 mirror
    n = len(pos)
    kargs = (params.w_appearance, params.w_smoothness, params.theta_alpha,
             params.theta_beta, params.theta_gamma)
    dense = kernels.crf_kernel_rows(pos, rgb, 0, n, *kargs) if n <= DENSE_LIMIT else None
    q = np.stack([1.0 - p.ravel(), p.ravel()], 1)
    for _ in range(params.iterations):
        if dense is not None:
            msg = dense @ q
        else:
            msg = np.empty_like(q)
            for r0 in range(0, n, ROW_BLOCK):
                r1 = min(r0 + ROW_BLOCK, n)
                msg[r0:r1] = kernels.crf_kernel_rows(pos, rgb, r0, r1, *kargs) @ q
        # Potts: label l pays k(i, j) for every neighbour mass not on l
        energy = unary + msg[:, ::-1]
        energy -= energy.min(axis=1, keepdims=True)
        e = np.exp(-energy)
        q = e / e.sum(axis=1, keepdims=True)
    # exp underflow can saturate a marginal; keep it strictly inside (0, 1)
    return np.clip(q[:, 1], PROB_CLIP, 1.0 - PROB_CLIP).reshape(h, w)
