"""Grid decoding, class-specific scores, IoU and greedy non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_CONF = 0.25
DEFAULT_IOU = 0.45


@dataclass(frozen=True)
class BBox:
    """Image-normalized center-format box with a class id and score."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    score: float = 1.0

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


def iou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        inter = 0.0
    else:
        inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area; 0 when the union is empty."""
    return iou_xyxy(a.xyxy(), b.xyxy())


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (n, 4) and (m, 4) arrays of center-format boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(ax1[:, None], bx1[None])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(ay1[:, None], by1[None])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a[:, None] + area_b[None] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def class_score(p_class_given_obj, confidence):
    """Class-specific confidence: P(class | object) times box confidence."""
    return np.multiply(p_class_given_obj, confidence)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * np.tanh(0.5 * x) + 0.5


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_arrays(raw: np.ndarray, S: int, B: int, C: int, conf_thresh: float = DEFAULT_CONF, logits: bool = True) -> np.ndarray:
    """Vectorized decode of one S x S x (B*5+C) grid.

    Returns an (n, 6) float64 array of rows (cx, cy, w, h, class_id, score) in
    cell-major, predictor-minor order.  With ``logits=False`` the confidence
    and class slots are read as probabilities (target tensors).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (S, S, B * 5 + C):
        raise ValueError(f"grid shape {raw.shape} does not match S={S}, B={B}, C={C} (expected {(S, S, B * 5 + C)})")
    boxes = raw[..., : B * 5].reshape(S, S, B, 5)
    cls = raw[..., B * 5 :]
    if logits:
        conf = _sigmoid(boxes[..., 4])
        probs = _softmax(cls)
    else:
        conf = boxes[..., 4]
        probs = cls
    k = probs.argmax(axis=-1)
    best = np.take_along_axis(probs, k[..., None], axis=-1)[..., 0]
    score = class_score(best[..., None], conf)  # S, S, B
    keep = score >= conf_thresh
    if not keep.any():
        return np.zeros((0, 6))
    ii, jj, bb = np.nonzero(keep)
    x, y = boxes[ii, jj, bb, 0], boxes[ii, jj, bb, 1]
    cx = (jj + x) / S
    cy = (ii + y) / S
    w, h = boxes[ii, jj, bb, 2], boxes[ii, jj, bb, 3]
    rows = np.stack([cx, cy, w, h, k[ii, jj].astype(np.float64), score[ii, jj, bb]], axis=1)
    return _clip_rows(rows)


def _clip_rows(rows: np.ndarray) -> np.ndarray:
    """Clip boxes to the unit square, dropping degenerate ones."""
    x1 = np.clip(rows[:, 0] - rows[:, 2] / 2, 0.0, 1.0)
    y1 = np.clip(rows[:, 1] - rows[:, 3] / 2, 0.0, 1.0)
    x2 = np.clip(rows[:, 0] + rows[:, 2] / 2, 0.0, 1.0)
    y2 = np.clip(rows[:, 1] + rows[:, 3] / 2, 0.0, 1.0)
    inside = (x1 == rows[:, 0] - rows[:, 2] / 2) & (x2 == rows[:, 0] + rows[:, 2] / 2) & (
        y1 == rows[:, 1] - rows[:, 3] / 2) & (y2 == rows[:, 1] + rows[:, 3] / 2)
    out = rows.copy()
    moved = ~inside
    out[moved, 0] = (x1[moved] + x2[moved]) / 2
    out[moved, 1] = (y1[moved] + y2[moved]) / 2
    out[moved, 2] = x2[moved] - x1[moved]
    out[moved, 3] = y2[moved] - y1[moved]
    return out[(out[:, 2] > 0) & (out[:, 3] > 0)]


def rows_to_boxes(rows: np.ndarray) -> list[BBox]:
    return [BBox(float(r[0]), float(r[1]), float(r[2]), float(r[3]), int(r[4]), float(r[5])) for r in rows]


def boxes_to_rows(boxes: Sequence[BBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 6))
    return np.array([[b.cx, b.cy, b.w, b.h, b.class_id, b.score] for b in boxes], dtype=np.float64)


def decode_grid(raw: np.ndarray, S: int, B: int, C: int, conf_thresh: float = DEFAULT_CONF, logits: bool = True) -> list[BBox]:
    """Decode one grid into boxes with class-specific score >= ``conf_thresh``."""
    return rows_to_boxes(decode_arrays(raw, S, B, C, conf_thresh, logits))


def nms_rows(rows: np.ndarray, iou_thresh: float = DEFAULT_IOU, class_aware: bool = True, max_det: int | None = None) -> np.ndarray:
    """Greedy NMS over (n, 6) rows; returns kept rows sorted by score descending.

    Order: score descending, then smaller class id, then input order.
    """
    n = len(rows)
    if n == 0:
        return rows.reshape(0, 6)
    order = np.lexsort((np.arange(n), rows[:, 4], -rows[:, 5]))
    rows = rows[order]
    ious = iou_matrix(rows[:, :4], rows[:, :4])
    if class_aware:
        ious = np.where(rows[:, 4][:, None] == rows[:, 4][None], ious, 0.0)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        if max_det is not None and len(keep) >= max_det:
            break
        suppressed |= ious[i] >= iou_thresh
    return rows[keep]


def nms(boxes: Sequence[BBox], iou_thresh: float = DEFAULT_IOU, class_aware: bool = True) -> list[BBox]:
    """Greedy non-maximum suppression; output sorted by score descending."""
    return rows_to_boxes(nms_rows(boxes_to_rows(boxes), iou_thresh, class_aware))


def postprocess(grids: Sequence[np.ndarray], B: int, C: int, conf_thresh: float = DEFAULT_CONF,
                iou_thresh: float = DEFAULT_IOU, max_candidates: int = 300, max_det: int = 100) -> np.ndarray:
    """Decode every scale of one image, keep the top candidates and run NMS."""
    parts = [decode_arrays(g, g.shape[0], B, C, conf_thresh) for g in grids]
    rows = np.concatenate(parts, axis=0) if parts else np.zeros((0, 6))
    if len(rows) > max_candidates:
        top = np.argsort(-rows[:, 5], kind="stable")[:max_candidates]
        rows = rows[np.sort(top)]
    return nms_rows(rows, iou_thresh, True, max_det)
