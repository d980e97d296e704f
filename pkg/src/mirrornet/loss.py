"""Lovasz-hinge and BCE losses with deep supervision."""

from __future__ import annotations

import numpy as np

#: Incremented on every lovasz_hinge call; lets callers assert a code path ran (or did not).
LOVASZ_CALLS = 0


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gt = np.asarray(gt_sorted, dtype=np.float64)
    p = gt.sum()
    intersection = p - np.cumsum(gt)
    union = p + np.cumsum(1.0 - gt)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_hinge_per_image(logits: np.ndarray, mask: np.ndarray):
    """Lovasz hinge of every image in the batch, vectorized over images.

    Returns ``(losses (N,), grads)`` where ``grads[i]`` is the gradient of
    ``losses[i]`` alone. Ties in the error ordering break by pixel index.
    """
    global LOVASZ_CALLS
    LOVASZ_CALLS += 1
    logits, mask = _check(logits, mask)
    n = logits.shape[0]
    flat = logits.reshape(n, -1).astype(np.float64)
    labels = mask.reshape(n, -1).astype(np.float64)
    if flat.shape[1] == 0:
        raise ValueError("lovasz_hinge on an empty image")
    signs = 2.0 * labels - 1.0
    errors = 1.0 - flat * signs
    order = np.argsort(-errors, axis=1, kind="stable")
    errors_sorted = np.take_along_axis(errors, order, axis=1)
    gt_sorted = np.take_along_axis(labels, order, axis=1)
    p = gt_sorted.sum(axis=1, keepdims=True)
    # union >= 1 everywhere: either p > 0 or the first sorted pixel is negative
    jaccard = 1.0 - (p - np.cumsum(gt_sorted, axis=1)) / (p + np.cumsum(1.0 - gt_sorted, axis=1))
    jaccard[:, 1:] = jaccard[:, 1:] - jaccard[:, :-1]
    losses = np.einsum("ij,ij->i", np.maximum(errors_sorted, 0.0), jaccard)
    grad = np.empty_like(flat)
    active = (errors_sorted > 0.0) * jaccard * np.take_along_axis(signs, order, axis=1)
    np.put_along_axis(grad, order, -active, axis=1)
    return losses, grad.reshape(logits.shape)


def lovasz_hinge(logits: np.ndarray, mask: np.ndarray):
    """Per-image lovasz hinge averaged over the batch.

    ``logits`` and ``mask`` are (N, 1, H, W); returns ``(loss, grad_logits)``.
    """
    losses, grad = lovasz_hinge_per_image(logits, mask)
    n = len(losses)
    return float(losses.sum() / n), (grad / n).astype(np.asarray(logits).dtype)


def bce(logits: np.ndarray, mask: np.ndarray):
    """Mean binary cross-entropy on logits; returns ``(loss, grad_logits)``."""
    logits, mask = _check(logits, mask)
    x = logits.astype(np.float64)
    m = mask.astype(np.float64)
    # log(1 + e^-|x|) + max(x, 0) - m * x
    per_pixel = np.logaddexp(0.0, -np.abs(x)) + np.maximum(x, 0.0) - m * x
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    grad = (sig - m) / x.size
    return float(per_pixel.mean()), grad.astype(logits.dtype)


LOSSES = {"lovasz": lovasz_hinge, "bce": bce}


def total_loss(maps, mask, weights, kind: str = "lovasz"):
    """Weighted sum over supervision levels; returns ``(total, [grad per level])``."""
    if len(maps) != len(weights):
        raise ValueError(f"{len(maps)} maps but {len(weights)} weights")
    if kind not in LOSSES:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {sorted(LOSSES)}")
    fn = LOSSES[kind]
    total = 0.0
    grads = []
    for m, w in zip(maps, weights):
        if w == 0:
            grads.append(np.zeros_like(m))
            continue
        loss, g = fn(m, mask)
        total += w * loss
        grads.append(w * g)
    return total, grads


def _check(logits, mask):
    logits = np.asarray(logits)
    mask = np.asarray(mask)
    if logits.ndim == 3:
        logits = logits[:, None]
    if mask.ndim == 3:
        mask = mask[:, None]
    if logits.shape != mask.shape:
        raise ValueError(f"logits shape {logits.shape} != mask shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary {0, 1}")
    return logits, mask
