"""Task metrics: precision@1 for referring queries, AP at a fixed IoU for
text localization, and COCO-style mAP for detection.

AP uses greedy confidence-ordered matching and 101-point interpolated
precision-recall area, computed per category over records pooled across
images. All functions are pure over EvalRecords.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MAX_PREDICTIONS_PER_IMAGE = 100
MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_LEVELS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalRecord:
    """Predictions and ground truth for one (image, query) pair.

    Predictions are kept sorted by descending score and capped at 100 per
    record. Arrays may be empty but must stay aligned.
    """

    image_id: int
    query: str
    pred_boxes: np.ndarray  # (P, 4)
    pred_scores: np.ndarray  # (P,)
    pred_categories: np.ndarray  # (P,)
    gt_boxes: np.ndarray  # (G, 4)
    gt_categories: np.ndarray  # (G,)

    def __post_init__(self):
        self.pred_boxes = np.asarray(self.pred_boxes, dtype=np.float64).reshape(-1, 4)
        self.pred_scores = np.asarray(self.pred_scores, dtype=np.float64).reshape(-1)
        self.pred_categories = np.asarray(self.pred_categories, dtype=np.int64).reshape(-1)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.gt_categories = np.asarray(self.gt_categories, dtype=np.int64).reshape(-1)
        if not (len(self.pred_boxes) == len(self.pred_scores) == len(self.pred_categories)):
            raise ValueError("prediction arrays must align")
        if len(self.gt_boxes) != len(self.gt_categories):
            raise ValueError("ground-truth arrays must align")
        order = np.argsort(-self.pred_scores, kind="stable")[:MAX_PREDICTIONS_PER_IMAGE]
        self.pred_boxes = self.pred_boxes[order]
        self.pred_scores = self.pred_scores[order]
        self.pred_categories = self.pred_categories[order]


def _iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, 4) x (M, 4) pairwise IoU; zero-area boxes score 0."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def precision_at_1(records: list[EvalRecord]) -> float:
    """Fraction of single-gt records whose top prediction hits at IoU >= 0.5."""
    if not records:
        raise ValueError("no records")
    hits = 0
    for rec in records:
        if len(rec.gt_boxes) != 1:
            raise ValueError(
                f"record ({rec.image_id}, {rec.query!r}) has {len(rec.gt_boxes)} ground truths, expected 1"
            )
        if len(rec.pred_boxes) == 0:
            continue
        iou = _iou(rec.pred_boxes[:1], rec.gt_boxes)[0, 0]
        if iou >= 0.5:
            hits += 1
    return hits / len(records)


def _category_pr(records: list[EvalRecord], category: int, iou_threshold: float):
    """Cumulative TP/FP flags (confidence-ordered) and the gt count."""
    preds = []  # (score, record index, pred index)
    n_gt = 0
    for r_idx, rec in enumerate(records):
        n_gt += int((rec.gt_categories == category).sum())
        for p_idx in np.nonzero(rec.pred_categories == category)[0]:
            preds.append((rec.pred_scores[p_idx], r_idx, int(p_idx)))
    preds.sort(key=lambda t: (-t[0], t[1], t[2]))

    matched: dict[int, set[int]] = {}
    tp = np.zeros(len(preds))
    for i, (_, r_idx, p_idx) in enumerate(preds):
        rec = records[r_idx]
        gt_idx = np.nonzero(rec.gt_categories == category)[0]
        used = matched.setdefault(r_idx, set())
        best_iou, best_j = -1.0, -1
        ious = _iou(rec.pred_boxes[p_idx : p_idx + 1], rec.gt_boxes[gt_idx])[0] if len(gt_idx) else []
        for j, giou in zip(gt_idx, ious):
            if j in used:
                continue
            # must clear the threshold; ties keep the lower gt index
            if giou >= iou_threshold and giou > best_iou:
                best_iou, best_j = giou, int(j)
        if best_j >= 0:
            used.add(best_j)
            tp[i] = 1.0
    return tp, n_gt


def _ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    if len(tp) == 0:
        return 0.0
    tpc = np.cumsum(tp)
    fpc = np.cumsum(1.0 - tp)
    recall = tpc / n_gt
    precision = tpc / (tpc + fpc)
    # precision envelope, then sample at the 101 recall levels
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_LEVELS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def per_category_ap(records: list[EvalRecord], iou_threshold: float) -> dict[int, float]:
    """AP per category, over categories with at least one ground truth."""
    categories = sorted({int(c) for rec in records for c in rec.gt_categories})
    out = {}
    for cat in categories:
        tp, n_gt = _category_pr(records, cat, iou_threshold)
        out[cat] = _ap_from_tp(tp, n_gt)
    return out


def average_precision(records: list[EvalRecord], iou_threshold: float):
    """Mean AP over categories with ground truth; None when no gt exists."""
    table = per_category_ap(records, iou_threshold)
    if not table:
        return None
    return float(np.mean(list(table.values())))


def coco_map(records: list[EvalRecord]):
    """Mean of average_precision over IoU thresholds 0.50, 0.55, ..., 0.95."""
    values = [average_precision(records, thr) for thr in MAP_THRESHOLDS]
    if any(v is None for v in values):
        return None
    return float(np.mean(values))


@dataclass
class MetricsReport:
    """Per-task metric values; fields are None when not applicable."""

    precision_at_1: float | None = None
    ap50: float | None = None
    map: float | None = None
    per_category_ap50: dict[int, float] = field(default_factory=dict)
    num_records: int = 0

    def __post_init__(self):
        for name in ("precision_at_1", "ap50", "map"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")

    def to_json(self) -> str:
        payload = {
            "precision_at_1": self.precision_at_1,
            "ap50": self.ap50,
            "map": self.map,
            "per_category_ap50": {str(k): v for k, v in self.per_category_ap50.items()},
            "num_records": self.num_records,
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    def format_table(self, category_names: dict[int, str] | None = None) -> str:
        rows = [("records", str(self.num_records))]
        if self.precision_at_1 is not None:
            rows.append(("precision@1", f"{self.precision_at_1:.4f}"))
        if self.ap50 is not None:
            rows.append(("AP50", f"{self.ap50:.4f}"))
        if self.map is not None:
            rows.append(("mAP", f"{self.map:.4f}"))
        for cat, ap in sorted(self.per_category_ap50.items()):
            name = category_names.get(cat, str(cat)) if category_names else str(cat)
            rows.append((f"AP50[{name}]", f"{ap:.4f}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)
