"""Mirror segmentation metrics: IoU, pixel accuracy, F-beta, MAE, BER."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA_SQ = 0.3


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def n_pos(self) -> int:
        return self.tp + self.fn

    @property
    def n_neg(self) -> int:
        return self.tn + self.fp

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def iou_accuracy(c: ConfusionCounts) -> tuple[float, float]:
    union = c.tp + c.fp + c.fn
    iou = c.tp / union if union else 1.0
    acc = (c.tp + c.tn) / c.total if c.total else 1.0
    return iou, acc


def f_beta(c: ConfusionCounts, beta_sq: float = BETA_SQ) -> float:
    if beta_sq <= 0:
        raise ValueError("beta_sq must be positive")
    if c.tp == 0:
        return 0.0
    precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn)
    return (1 + beta_sq) * precision * recall / (beta_sq * precision + recall)


def mae(prob: np.ndarray, gt: np.ndarray) -> float:
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if prob.shape != gt.shape:
        raise ValueError(f"prediction shape {prob.shape} != ground-truth shape {gt.shape}")
    return float(np.abs(prob - gt).mean())


def ber(c: ConfusionCounts) -> float:
    if c.n_pos == 0 or c.n_neg == 0:
        raise ValueError("BER is undefined without both mirror and non-mirror pixels")
    return 100.0 * (1.0 - 0.5 * (c.tp / c.n_pos + c.tn / c.n_neg))


@dataclass
class MetricsReport:
    """Dataset-level report.

    IoU, accuracy and BER come from confusion counts summed over all images;
    F-beta and MAE are averaged per image.
    """

    counts: ConfusionCounts = field(default_factory=ConfusionCounts)
    f_betas: list = field(default_factory=list)
    maes: list = field(default_factory=list)
    threshold: float = 0.5

    def add(self, prob: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(prob) >= self.threshold
        c = confusion(pred, gt)
        self.counts = self.counts + c
        self.f_betas.append(f_beta(c))
        self.maes.append(mae(prob, gt))

    @property
    def n_images(self) -> int:
        return len(self.maes)

    @property
    def iou(self) -> float:
        return iou_accuracy(self.counts)[0]

    @property
    def accuracy(self) -> float:
        return iou_accuracy(self.counts)[1]

    @property
    def f_beta(self) -> float:
        return float(np.mean(self.f_betas)) if self.f_betas else 0.0

    @property
    def mae(self) -> float:
        return float(np.mean(self.maes)) if self.maes else 0.0

    @property
    def ber(self) -> float:
        return ber(self.counts)

    def as_dict(self) -> dict:
        return {"iou": self.iou, "acc": self.accuracy, "f_beta": self.f_beta,
                "mae": self.mae, "ber": self.ber, "n_images": self.n_images}

    def records(self) -> str:
        return "\n".join(
            f"{k}={v}" if k == "n_images" else f"{k}={v:.6f}" for k, v in self.as_dict().items())

    def table(self) -> str:
        d = self.as_dict()
        head = f"{'IoU':>8} {'Acc':>8} {'F_beta':>8} {'MAE':>8} {'BER':>8} {'images':>7}"
        row = (f"{100 * d['iou']:8.2f} {d['acc']:8.3f} {d['f_beta']:8.3f} "
               f"{d['mae']:8.3f} {d['ber']:8.2f} {d['n_images']:7d}")
        return head + "\n" + row
