"""Training and evaluation loops."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import preprocess
from .loss import total_loss
from .metrics import MetricsReport
from .network import MirrorNet, NetworkConfig, build_network
from .optim import OptimConfig, poly_lr, sgd_step
from .params import ParamStore
from .tensor import sigmoid


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_iou: float | None
    lr: float
    seconds: float

    def record(self) -> str:
        iou = "nan" if self.train_iou is None else f"{self.train_iou:.6f}"
        return (f"epoch={self.epoch} loss={self.loss:.6f} train_iou={iou} "
                f"lr={self.lr:.6e} seconds={self.seconds:.2f}")


@dataclass
class TrainResult:
    params: ParamStore
    history: list = field(default_factory=list)

    @property
    def final_iou(self) -> float | None:
        ious = [h.train_iou for h in self.history if h.train_iou is not None]
        return ious[-1] if ious else None


def stack_samples(records, resolution: int):
    pairs = [preprocess(r, resolution) for r in records]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def predict_probs(net: MirrorNet, images: np.ndarray, batch_size: int = 10) -> np.ndarray:
    """Finest-level mirror probabilities (N, H, W) in inference mode."""
    out = []
    for i in range(0, len(images), batch_size):
        logits = net.forward(images[i:i + batch_size], training=False)[0]
        out.append(sigmoid(logits.astype(np.float64))[:, 0])
    return np.concatenate(out)


def evaluate_probs(probs: np.ndarray, masks: np.ndarray, threshold: float = 0.5) -> MetricsReport:
    report = MetricsReport(threshold=threshold)
    for p, m in zip(probs, masks):
        report.add(p, m.reshape(p.shape))
    return report


def train(records, net_cfg: NetworkConfig, opt_cfg: OptimConfig, loss_kind: str = "lovasz",
          augment: bool = True, target_iou: float | None = None, eval_every: int = 1,
          log=None, params: ParamStore | None = None, bce_warmup: int = 0,
          max_epochs: int | None = None) -> TrainResult:
    """SGD over ``records`` with poly decay; deterministic given ``net_cfg.seed``.

    The first ``bce_warmup`` epochs use BCE whatever ``loss_kind`` says; the
    lovasz hinge makes slow progress from a random start.

    ``target_iou`` stops training at the first evaluated epoch whose train-set
    IoU (inference mode) reaches it; ``max_epochs`` cuts the run short
    unconditionally. The poly schedule always spans the full ``opt_cfg.epochs``.
    """
    net_cfg.validate()
    opt_cfg.validate()
    if not records:
        raise ValueError("no training records")
    if bce_warmup < 0:
        raise ValueError("bce_warmup must be non-negative")
    images, masks = stack_samples(records, net_cfg.resolution)
    store = params if params is not None else build_network(net_cfg)
    net = MirrorNet(net_cfg, store)
    rng = np.random.default_rng([net_cfg.seed, 1])
    n = len(images)
    per_epoch = -(-n // opt_cfg.batch_size)
    max_iter = opt_cfg.epochs * per_epoch
    result = TrainResult(store)
    it = 0
    last = opt_cfg.epochs if max_epochs is None else min(max_epochs, opt_cfg.epochs)
    for epoch in range(1, last + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        lr = opt_cfg.base_lr
        kind = "bce" if epoch <= bce_warmup else loss_kind
        for b in range(per_epoch):
            idx = order[b * opt_cfg.batch_size:(b + 1) * opt_cfg.batch_size]
            x, y = images[idx].copy(), masks[idx].copy()
            if augment:
                flip = rng.random(len(idx)) < 0.5
                x[flip] = x[flip][..., ::-1]
                y[flip] = y[flip][..., ::-1]
            lr = poly_lr(opt_cfg.base_lr, it, max_iter, opt_cfg.power)
            maps = net.forward(x, training=True)
            loss, grads = total_loss(maps, y, net_cfg.loss_weights, kind)
            net.backward(grads)
            sgd_step(store, lr, opt_cfg.momentum, opt_cfg.weight_decay, opt_cfg.decay_norm)
            losses.append(loss)
            it += 1
        iou = None
        if eval_every and (epoch % eval_every == 0 or epoch == last):
            iou = evaluate_probs(predict_probs(net, images), masks).iou
        entry = EpochLog(epoch, float(np.mean(losses)), iou, lr, time.perf_counter() - t0)
        result.history.append(entry)
        if log is not None:
            log(entry)
        if target_iou is not None and iou is not None and iou >= target_iou:
            break
    return result
