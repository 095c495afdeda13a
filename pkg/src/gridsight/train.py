"""SGD with momentum, the training loop and dataset-level evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, batch_iter
from .decode import postprocess, rows_to_boxes
from .loss import LossBreakdown, LossHyper, compute_loss
from .metrics import EvalReport, evaluate_detections
from .model import Model
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "box_loss", "cls_loss", "obj_loss", "aux_loss", "precision", "recall", "map50", "map50_95")
METRICS_SCHEMA_VERSION = 1


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}{': ' + detail if detail else ''}")
        self.epoch, self.step = epoch, step


class SGD:
    """v <- momentum * v + grad + weight_decay * p;  p <- p - lr * v."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity: dict[int, np.ndarray] = {}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity.get(id(p))
            v = g.astype(p.data.dtype, copy=True) if v is None else (self.momentum * v + g).astype(p.data.dtype, copy=False)
            self.velocity[id(p)] = v
            p.data -= (lr * v).astype(p.data.dtype, copy=False)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(model: Model, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, optimizer: SGD | None = None) -> SGD:
    """Apply one update to every trainable parameter of ``model`` and zero its grads."""
    if optimizer is None:
        optimizer = SGD([p.tensor for p in model.parameters() if p.trainable], lr, momentum, weight_decay)
    optimizer.lr, optimizer.momentum, optimizer.weight_decay = lr, momentum, weight_decay
    optimizer.step(lr)
    return optimizer


@dataclass
class TrainHyper:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_frac: float = 0.03
    seed: int = 0
    loss: LossHyper = field(default_factory=LossHyper)
    eval_conf: float = 0.001
    eval_iou: float = 0.45


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Constant learning rate after a linear warmup over the first fraction of steps."""
    warm = int(math.ceil(warmup_frac * total_steps))
    if warm and step < warm:
        return base_lr * (step + 1) / warm
    return base_lr


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    report: EvalReport | None = None

    def csv_row(self) -> list[str]:
        r = self.report
        vals = [self.losses["box_loss"], self.losses["cls_loss"], self.losses["obj_loss"], self.losses["aux_loss"],
                r.precision if r else 0.0, r.recall if r else 0.0, r.map50 if r else 0.0, r.map50_95 if r else 0.0]
        return [str(self.epoch)] + [f"{v:.6f}" for v in vals]


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)


def train_step(model: Model, optimizer: SGD, images: np.ndarray, targets, hyper: TrainHyper, lr: float) -> LossBreakdown:
    cfg = model.config
    preds = model.forward(Tensor(images), "train")
    losses = compute_loss(preds, targets, cfg.num_boxes, cfg.num_classes, hyper.loss)
    if not math.isfinite(losses.total):
        raise FloatingPointError("loss is not finite")
    losses.tensor.backward()
    optimizer.step(lr)
    return losses


def train(model: Model, dataset: Dataset, hyper: TrainHyper, val: Dataset | None = None,
          on_epoch: Callable[[EpochRecord, Model], None] | None = None) -> TrainHistory:
    """Train with SGD; evaluates on ``val`` after each epoch when given."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    cfg = model.config
    if dataset.num_classes != cfg.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model expects {cfg.num_classes}")
    optimizer = SGD([p.tensor for p in model.parameters() if p.trainable], hyper.lr, hyper.momentum, hyper.weight_decay)
    history = TrainHistory()
    steps_per_epoch = math.ceil(len(dataset) / hyper.batch_size)
    total = steps_per_epoch * hyper.epochs
    step = 0
    model.set_stat_updates(True)
    for epoch in range(hyper.epochs):
        sums = dict(box_loss=0.0, cls_loss=0.0, obj_loss=0.0, aux_loss=0.0, total=0.0)
        n_batches = 0
        for images, targets, _ in batch_iter(dataset, hyper.batch_size, cfg.grid_sizes, cfg.num_boxes,
                                             hyper.seed, epoch, True, np.dtype(cfg.dtype)):
            lr = lr_at(step, total, hyper.lr, hyper.warmup_frac)
            try:
                losses = train_step(model, optimizer, images, targets, hyper, lr)
            except FloatingPointError as e:
                raise TrainingDiverged(epoch, step, str(e)) from e
            for k, v in losses.as_dict().items():
                sums[k] += v
            n_batches += 1
            step += 1
        means = {k: v / max(n_batches, 1) for k, v in sums.items()}
        report = evaluate_model(model, val, hyper.eval_conf, hyper.eval_iou)[0] if val is not None and len(val) else None
        rec = EpochRecord(epoch + 1, means, report)
        history.epochs.append(rec)
        logger.info("epoch %d  loss %.4f  map50 %s", epoch + 1, means["total"], f"{report.map50:.4f}" if report else "-")
        if on_epoch is not None:
            on_epoch(rec, model)
    return history


def predict(model: Model, images: np.ndarray, conf: float = 0.25, iou: float = 0.45,
            max_candidates: int = 300, max_det: int = 100) -> list[np.ndarray]:
    """Post-processed detections per image as (n, 6) rows (cx, cy, w, h, class, score)."""
    cfg = model.config
    grids = model.detect_tensors(images)
    return [postprocess([g[k] for g in grids], cfg.num_boxes, cfg.num_classes, conf, iou, max_candidates, max_det)
            for k in range(images.shape[0])]


def detect_dataset(model: Model, dataset: Dataset, conf: float = 0.25, iou: float = 0.45, batch_size: int = 16) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    dtype = np.dtype(model.config.dtype)
    for k in range(0, len(dataset), batch_size):
        images = np.stack([s.image for s in dataset.samples[k : k + batch_size]]).astype(dtype, copy=False)
        out.extend(predict(model, images, conf, iou))
    return out


def evaluate_model(model: Model, dataset: Dataset, conf: float = 0.001, iou: float = 0.45) -> tuple[EvalReport, list[np.ndarray]]:
    if dataset.num_classes != model.config.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model expects {model.config.num_classes}")
    rows = detect_dataset(model, dataset, conf, iou)
    dets = [rows_to_boxes(r) for r in rows]
    gts = [s.annotations for s in dataset.samples]
    return evaluate_detections(dets, gts, dataset.num_classes, dataset.class_names), rows
