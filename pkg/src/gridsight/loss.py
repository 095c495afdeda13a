"""YOLOv1-family composite loss over grid predictions.

For a cell holding an object the responsible predictor is the one whose
decoded box overlaps the ground truth most (ties go to the lowest index).
Per image, summed over cells and averaged over the batch:

    box  = l_coord * sum_resp[(x-tx)^2 + (y-ty)^2 + (sqrt w - sqrt tw)^2 + (sqrt h - sqrt th)^2]
    obj  = sum_resp (conf - IoU)^2 + l_noobj * sum_other conf^2
    cls  = sum_object_cells -log softmax(class logits)[true class]
    total = box + obj + cls + l_aux * (box + obj + cls of the auxiliary heads)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class LossHyper:
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    lambda_aux: float = 0.25


@dataclass
class Assignment:
    """Responsible-predictor mask and IoU targets for one scale (held constant)."""

    responsible: np.ndarray  # N, S, S, B  bool
    iou: np.ndarray  # N, S, S, B


@dataclass
class LossBreakdown:
    box_loss: float
    cls_loss: float
    obj_loss: float
    aux_loss: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {"box_loss": self.box_loss, "cls_loss": self.cls_loss, "obj_loss": self.obj_loss,
                "aux_loss": self.aux_loss, "total": self.total}


def _cell_boxes(x, y, w, h, S):
    ii = np.arange(S).reshape(1, S, 1, 1)
    jj = np.arange(S).reshape(1, 1, S, 1)
    cx = (jj + x) / S
    cy = (ii + y) / S
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def assign(pred: np.ndarray, target: np.ndarray, mask: np.ndarray, B: int) -> Assignment:
    """Pick the responsible predictor per object cell and its IoU with the truth."""
    n, S = pred.shape[:2]
    p = pred[..., : B * 5].reshape(n, S, S, B, 5).astype(np.float64)
    t = target[..., :4].astype(np.float64)
    px1, py1, px2, py2 = _cell_boxes(p[..., 0], p[..., 1], p[..., 2], p[..., 3], S)
    tx1, ty1, tx2, ty2 = _cell_boxes(t[..., 0:1], t[..., 1:2], t[..., 2:3], t[..., 3:4], S)
    iw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    ih = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    union = (px2 - px1) * (py2 - py1) + (tx2 - tx1) * (ty2 - ty1) - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    iou = np.where(mask[..., None], iou, 0.0)
    best = iou.argmax(axis=-1)
    resp = (np.arange(B) == best[..., None]) & mask[..., None]
    return Assignment(resp, np.where(resp, iou, 0.0))


def grid_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, B: int, C: int,
              hyper: LossHyper, assignment: Assignment | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(box, obj, cls) loss tensors for one scale, each averaged over the batch."""
    n, S = pred.shape[0], pred.shape[1]
    if pred.shape != target.shape or mask.shape != pred.shape[:3]:
        raise ShapeError(f"prediction {pred.shape} / target {target.shape} / mask {mask.shape} mismatch")
    if pred.shape[3] != B * 5 + C:
        raise ShapeError(f"last dim {pred.shape[3]} != B*5+C = {B * 5 + C}")
    if assignment is None:
        assignment = assign(pred.data, target, mask, B)
    dt = pred.dtype
    resp = assignment.responsible.astype(dt)
    inv_n = 1.0 / n

    boxes = T.reshape(T.index(pred, (Ellipsis, slice(0, B * 5))), (n, S, S, B, 5))
    tb = target[..., :4].astype(dt)[:, :, :, None, :]  # broadcast over B
    xy = T.index(boxes, (Ellipsis, slice(0, 2)))
    wh = T.index(boxes, (Ellipsis, slice(2, 4)))
    d_xy = T.sub(xy, tb[..., 0:2])
    d_wh = T.sub(T.sqrt(wh), np.sqrt(tb[..., 2:4]))
    sq = T.add(T.square(d_xy), T.square(d_wh))
    box = T.mul(T.tsum(T.mul(sq, resp[..., None])), hyper.lambda_coord * inv_n)

    conf = T.sigmoid(T.index(boxes, (Ellipsis, 4)))
    obj_term = T.tsum(T.mul(T.square(T.sub(conf, assignment.iou.astype(dt))), resp))
    noobj_term = T.tsum(T.mul(T.square(conf), (1.0 - resp)))
    obj = T.mul(T.add(obj_term, T.mul(noobj_term, hyper.lambda_noobj)), inv_n)

    logp = T.log_softmax(T.index(pred, (Ellipsis, slice(B * 5, B * 5 + C))), axis=-1)
    onehot = target[..., B * 5 :].astype(dt) * mask[..., None]
    cls = T.mul(T.tsum(T.mul(logp, onehot)), -inv_n)
    return box, obj, cls


def branch_loss(preds: Sequence[Tensor], targets, B: int, C: int, hyper: LossHyper,
                assignments=None, scale_weights: Sequence[float] | None = None) -> tuple[Tensor, Tensor, Tensor]:
    if len(preds) != len(targets):
        raise ShapeError(f"{len(preds)} prediction scales but {len(targets)} target scales")
    box = obj = cls = None
    for k, (p, (tgt, msk)) in enumerate(zip(preds, targets)):
        b, o, c = grid_loss(p, tgt, msk, B, C, hyper, None if assignments is None else assignments[k])
        if scale_weights is not None:
            wgt = scale_weights[k]
            b, o, c = T.mul(b, wgt), T.mul(o, wgt), T.mul(c, wgt)
        box = b if box is None else T.add(box, b)
        obj = o if obj is None else T.add(obj, o)
        cls = c if cls is None else T.add(cls, c)
    return box, obj, cls


def compute_loss(preds, targets, B: int, C: int, hyper: LossHyper | None = None,
                 assignments=None, aux_scale_weights: Sequence[float] | None = None) -> LossBreakdown:
    """Composite main + auxiliary loss.

    ``assignments`` (``{"main": [...], "aux": [...]}``) freezes responsible
    predictors and IoU targets, which makes the loss a smooth function of the
    predictions for gradient checking.  ``aux_scale_weights`` rescales the
    auxiliary loss per scale (0 removes one auxiliary head).
    """
    hyper = hyper or LossHyper()
    a_main = None if assignments is None else assignments.get("main")
    box, obj, cls = branch_loss(preds.main, targets, B, C, hyper, a_main)
    total = T.add(T.add(box, obj), cls)
    aux_val = 0.0
    if preds.aux is not None:
        a_aux = None if assignments is None else assignments.get("aux")
        ab, ao, ac = branch_loss(preds.aux, targets, B, C, hyper, a_aux, aux_scale_weights)
        aux = T.add(T.add(ab, ao), ac)
        aux_val = float(aux.data)
        total = T.add(total, T.mul(aux, hyper.lambda_aux))
    return LossBreakdown(float(box.data), float(cls.data), float(obj.data), aux_val, float(total.data), total)


def freeze_assignments(preds, targets, B: int) -> dict:
    out = {"main": [assign(p.data, t, m, B) for p, (t, m) in zip(preds.main, targets)]}
    if preds.aux is not None:
        out["aux"] = [assign(p.data, t, m, B) for p, (t, m) in zip(preds.aux, targets)]
    return out
