"""IoU, per-class average precision and mAP over detection lists.

Boxes here are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner.
AP uses all-points interpolation (area under the monotone precision
envelope); classes without ground truth are excluded from the mAP mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

AP_PROTOCOL = "all-points interpolation (VOC2010+), IoU>=0.5, greedy max-IoU matching"


def _xywh(box) -> tuple[float, float, float, float]:
    if hasattr(box, "box"):
        box = box.box
    if hasattr(box, "w") and hasattr(box, "h"):
        return float(box.x), float(box.y), float(box.w), float(box.h)
    x, y, w, h = box[:4]
    return float(x), float(y), float(w), float(h)


def iou(a, b) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes.

    Zero-area boxes give 0.
    """
    ax, ay, aw, ah = _xywh(a)
    bx, by, bw, bh = _xywh(b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    # areas can underflow to 0 for subnormal sides
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of xywh boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2], 0, None) * np.clip(a[:, 3], 0, None)
    area_b = np.clip(b[:, 2], 0, None) * np.clip(b[:, 3], 0, None)
    union = area_a[:, None] + area_b[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    zero = (area_a[:, None] <= 0) | (area_b[None] <= 0)
    return np.where(zero, 0.0, out)


def _as_per_image(items):
    # a flat list of boxes is treated as a single image
    items = list(items)
    if items and not isinstance(items[0], list):
        return [items]
    return [list(x) for x in items]


def match_detections(dets, gts, cls: int, iou_thresh: float = 0.5):
    """Greedy matching for one class over a list of images.

    ``dets`` and ``gts`` are per-image lists of objects exposing ``box``/``c``
    (detections additionally ``score``). Returns ``(scores, is_tp, n_gt)``
    with detections in descending-score order (stable on ties).
    """
    records = []
    n_gt = 0
    gt_boxes = []
    for img_gts in gts:
        boxes = np.array([_xywh(g) for g in img_gts if int(g.c) == cls], dtype=np.float64)
        gt_boxes.append(boxes.reshape(-1, 4))
        n_gt += len(boxes)
    for i, img_dets in enumerate(dets):
        for d in img_dets:
            if int(d.c) == cls:
                records.append((float(d.score), i, _xywh(d)))
    order = sorted(range(len(records)), key=lambda k: -records[k][0])
    taken = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    scores = np.empty(len(order))
    tp = np.zeros(len(order), dtype=bool)
    for rank, k in enumerate(order):
        score, img, box = records[k]
        scores[rank] = score
        cand = gt_boxes[img]
        if len(cand) == 0:
            continue
        ious = iou_matrix(np.array([box]), cand)[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh and not taken[img][j]:
            taken[img][j] = True
            tp[rank] = True
    return scores, tp, n_gt


def ap_from_matches(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP from a ranked TP/FP vector."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(dets, gts, cls: int, iou_thresh: float = 0.5) -> float:
    """AP for class ``cls``; ``nan`` when the class has no ground truth.

    Accepts per-image lists, or flat lists for a single image.
    """
    dets, gts = _as_per_image(dets), _as_per_image(gts)
    if len(dets) != len(gts):
        if not any(dets):
            dets = [[] for _ in gts]
        elif not gts:
            gts = [[] for _ in dets]
        else:
            raise ValueError("detections and ground truths cover different image counts")
    _, tp, n_gt = match_detections(dets, gts, cls, iou_thresh)
    return ap_from_matches(tp, n_gt)


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    mAP: float
    num_detections: int
    num_ground_truths: int
    per_target: dict[str, "EvalReport"] = field(default_factory=dict)
    protocol: str = AP_PROTOCOL

    def to_rows(self, step: int, strategy: str, target: str) -> list[dict]:
        rows = []
        for c, ap in sorted(self.per_class_ap.items()):
            rows.append(dict(step=step, strategy=strategy, target=target,
                             cls=c, AP=ap, mAP=self.mAP))
        if not rows:
            rows.append(dict(step=step, strategy=strategy, target=target,
                             cls=-1, AP=float("nan"), mAP=self.mAP))
        return rows


def evaluate_detections(dets: Sequence[Iterable], gts: Sequence[Iterable],
                        num_classes: int, iou_thresh: float = 0.5) -> EvalReport:
    """Per-class AP and mAP over paired per-image detection/GT lists."""
    dets = [list(d) for d in dets]
    gts = [list(g) for g in gts]
    if len(dets) != len(gts):
        raise ValueError("detections and ground truths cover different image counts")
    per_class: dict[int, float] = {}
    for c in range(num_classes):
        _, tp, n_gt = match_detections(dets, gts, c, iou_thresh)
        if n_gt:
            per_class[c] = ap_from_matches(tp, n_gt)
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(per_class_ap=per_class, mAP=m,
                      num_detections=sum(len(d) for d in dets),
                      num_ground_truths=sum(len(g) for g in gts))
