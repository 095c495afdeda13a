"""Precision, recall, detection matching, 101-point AP and mAP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decode import BBox, iou_matrix

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0  # exact k/100, unlike linspace


def precision(tp: int, fp: int) -> float:
    """tp / (tp + fp); 0.0 when there are no detections."""
    return tp / (tp + fp) if tp + fp else 0.0


def recall(tp: int, fn: int) -> float:
    """tp / (tp + fn); 1.0 when there is nothing to find."""
    return tp / (tp + fn) if tp + fn else 1.0


@dataclass
class MatchRecord:
    image_id: int
    det: BBox
    is_tp: bool
    matched_gt: int | None = None


def _check_classes(boxes, num_classes, what):
    if num_classes is None:
        return
    for b in boxes:
        if not 0 <= b.class_id < num_classes:
            raise ValueError(f"{what} class_id {b.class_id} outside [0, {num_classes})")


def match_detections(
    dets: Sequence[Sequence[BBox]],
    gts: Sequence[Sequence],
    iou_thresh: float = 0.5,
    num_classes: int | None = None,
) -> tuple[list[MatchRecord], dict[int, int]]:
    """Greedy per-image, per-class matching in descending score order.

    Ground truths only need ``cx, cy, w, h, class_id`` attributes.  Returns the
    match records (in image order, then score order) and the false-negative
    count per class.
    """
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists but {len(gts)} ground-truth lists")
    records: list[MatchRecord] = []
    fn: dict[int, int] = {}
    for img, (d_img, g_img) in enumerate(zip(dets, gts)):
        _check_classes(d_img, num_classes, "detection")
        _check_classes(g_img, num_classes, "ground truth")
        classes = sorted({b.class_id for b in d_img} | {g.class_id for g in g_img})
        for c in classes:
            gi = [k for k, g in enumerate(g_img) if g.class_id == c]
            di = [k for k, d in enumerate(d_img) if d.class_id == c]
            di.sort(key=lambda k: -d_img[k].score)  # stable: ties keep input order
            matched = np.zeros(len(gi), dtype=bool)
            if gi and di:
                ious = iou_matrix(
                    [[d_img[k].cx, d_img[k].cy, d_img[k].w, d_img[k].h] for k in di],
                    [[g_img[k].cx, g_img[k].cy, g_img[k].w, g_img[k].h] for k in gi],
                )
            for row, k in enumerate(di):
                best, best_j = -1.0, -1
                if gi:
                    cand = np.where(matched, -1.0, ious[row])
                    best_j = int(cand.argmax())
                    best = float(cand[best_j])
                if best >= iou_thresh and best_j >= 0:
                    matched[best_j] = True
                    records.append(MatchRecord(img, d_img[k], True, gi[best_j]))
                else:
                    records.append(MatchRecord(img, d_img[k], False, None))
            fn[c] = fn.get(c, 0) + int((~matched).sum())
    return records, fn


def pr_curve(records: Sequence[MatchRecord], n_gt: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative (scores, precision, recall) after sorting by score descending."""
    order = sorted(range(len(records)), key=lambda k: -records[k].det.score)
    tp = np.array([records[k].is_tp for k in order], dtype=np.float64)
    scores = np.array([records[k].det.score for k in order], dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    prec = ctp / np.maximum(ctp + cfp, 1e-300)
    rec = ctp / n_gt if n_gt else np.zeros_like(ctp)
    return scores, prec, rec


def average_precision(records: Sequence[MatchRecord], n_gt: int) -> float:
    """101-point interpolated AP: mean over r in {0, .01, ..., 1} of the best
    precision reached at recall >= r.  Equal scores form one cut."""
    if n_gt == 0 or not records:
        return 0.0
    scores, prec, rec = pr_curve(records, n_gt)
    # a tie group is a single score cut: keep only its last point
    last = np.r_[scores[1:] != scores[:-1], True]
    prec, rec = prec[last], rec[last]
    # precision envelope from the right
    env = np.maximum.accumulate(prec[::-1])[::-1]
    idx = np.searchsorted(rec, RECALL_POINTS, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def _gt_counts(gts) -> dict[int, int]:
    counts: dict[int, int] = {}
    for g_img in gts:
        for g in g_img:
            counts[g.class_id] = counts.get(g.class_id, 0) + 1
    return counts


def per_class_ap(dets, gts, iou_thresh: float, num_classes: int | None = None) -> dict[int, float]:
    records, _ = match_detections(dets, gts, iou_thresh, num_classes)
    counts = _gt_counts(gts)
    out = {}
    for c, n in sorted(counts.items()):
        out[c] = average_precision([r for r in records if r.det.class_id == c], n)
    return out


def map_at(dets, gts, iou_thresh: float = 0.5, num_classes: int | None = None) -> float:
    """Unweighted mean AP over classes with at least one ground truth."""
    aps = per_class_ap(dets, gts, iou_thresh, num_classes)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def map_range(dets, gts, num_classes: int | None = None) -> float:
    """Mean of ``map_at`` over IoU thresholds 0.50, 0.55, ..., 0.95."""
    return float(np.mean([map_at(dets, gts, t, num_classes) for t in IOU_THRESHOLDS]))


@dataclass
class ClassReport:
    precision: float
    recall: float
    ap50: float
    ap50_95: float
    tp: int
    fp: int
    fn: int
    n_gt: int


@dataclass
class EvalReport:
    per_class: dict[int, ClassReport]
    map50: float
    map50_95: float
    precision: float
    recall: float
    f1_threshold: float
    n_images: int
    n_detections: int
    class_names: list[str] = field(default_factory=list)

    def table(self) -> str:
        lines = [f"{'class':<12}{'gt':>6}{'tp':>6}{'fp':>6}{'fn':>6}{'P':>8}{'R':>8}{'AP50':>8}{'AP50-95':>9}"]
        for c, r in sorted(self.per_class.items()):
            name = self.class_names[c] if c < len(self.class_names) else str(c)
            lines.append(
                f"{name:<12}{r.n_gt:>6}{r.tp:>6}{r.fp:>6}{r.fn:>6}{r.precision:>8.4f}{r.recall:>8.4f}{r.ap50:>8.4f}{r.ap50_95:>9.4f}"
            )
        lines.append(
            f"{'all':<12}{'':>24}{self.precision:>8.4f}{self.recall:>8.4f}{self.map50:>8.4f}{self.map50_95:>9.4f}"
        )
        lines.append(f"P/R at F1-maximizing score threshold {self.f1_threshold:.4f}")
        return "\n".join(lines)

    def csv_rows(self) -> list[list]:
        rows = [["class", "n_gt", "tp", "fp", "fn", "precision", "recall", "ap50", "ap50_95"]]
        for c, r in sorted(self.per_class.items()):
            rows.append([c, r.n_gt, r.tp, r.fp, r.fn, f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.ap50:.6f}", f"{r.ap50_95:.6f}"])
        rows.append(["all", "", "", "", "", f"{self.precision:.6f}", f"{self.recall:.6f}", f"{self.map50:.6f}", f"{self.map50_95:.6f}"])
        return rows


def _f1_operating_point(records: Sequence[MatchRecord], n_gt: int) -> tuple[float, float, float]:
    """(precision, recall, score threshold) at the F1-maximizing cut."""
    if not records:
        return 0.0, recall(0, n_gt), 1.0
    scores, prec, rec = pr_curve(records, n_gt)
    # only cut between distinct scores
    last = np.r_[scores[1:] != scores[:-1], True]
    f1 = np.where(last, 2 * prec * rec / np.maximum(prec + rec, 1e-300), -1.0)
    k = int(f1.argmax())
    return float(prec[k]), float(rec[k]) if n_gt else 1.0, float(scores[k])


def evaluate_detections(dets, gts, num_classes: int, class_names: Sequence[str] = ()) -> EvalReport:
    """Full report: per-class P/R (at each class's F1-max threshold), AP50,
    AP50-95, TP/FP/FN at IoU 0.5; aggregate mAPs and pooled P/R."""
    counts = _gt_counts(gts)
    records50, fn50 = match_detections(dets, gts, 0.5, num_classes)
    ap_by_t = {t: per_class_ap(dets, gts, t, num_classes) for t in IOU_THRESHOLDS}
    per_class: dict[int, ClassReport] = {}
    present = sorted(set(counts) | {r.det.class_id for r in records50})
    for c in present:
        recs = [r for r in records50 if r.det.class_id == c]
        n_gt = counts.get(c, 0)
        p, rc, _ = _f1_operating_point(recs, n_gt)
        tp = sum(r.is_tp for r in recs)
        per_class[c] = ClassReport(
            precision=p,
            recall=rc,
            ap50=ap_by_t[0.5].get(c, 0.0),
            ap50_95=float(np.mean([ap_by_t[t].get(c, 0.0) for t in IOU_THRESHOLDS])),
            tp=tp,
            fp=len(recs) - tp,
            fn=fn50.get(c, 0),
            n_gt=n_gt,
        )
    total_gt = sum(counts.values())
    p, rc, thr = _f1_operating_point(records50, total_gt)
    map50 = float(np.mean(list(ap_by_t[0.5].values()))) if counts else 0.0
    map5095 = float(np.mean([np.mean(list(ap_by_t[t].values())) for t in IOU_THRESHOLDS])) if counts else 0.0
    return EvalReport(per_class, map50, map5095, p, rc, thr, len(gts), len(records50), list(class_names))
