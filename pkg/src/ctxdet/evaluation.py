"""COCO-style average precision over xyxy pixel boxes.

Predictions and ground truth are plain dicts ({"image_id", "category_id",
"bbox", "score"}); matching is greedy per descending score with each ground
truth box claimed at most once. Ground truth outside the active area range
is ignored rather than dropped: detections matched to ignored boxes vanish
from the precision-recall curve instead of counting as false positives,
as do unmatched detections whose own area falls outside the range.

All orderings break ties on box content, never on list position, so every
result is invariant to input order.
"""

import io
from dataclasses import dataclass

import numpy as np

from .geometry import iou
from .ioutil import canonical_json

IOU_THRESHOLDS = tuple(np.linspace(0.5, 0.95, 10))
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ap_small: float
    ap_medium: float
    ap_large: float
    per_category: dict

    def to_dict(self) -> dict:
        return {
            "ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
            "ap_small": self.ap_small, "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "per_category": {str(k): v for k, v in
                             sorted(self.per_category.items())},
        }


def _box_area(b) -> float:
    return max(0.0, float(b[2]) - float(b[0])) * \
        max(0.0, float(b[3]) - float(b[1]))


def _det_key(p):
    b = p["bbox"]
    return (-p["score"], p["image_id"], float(b[0]), float(b[1]),
            float(b[2]), float(b[3]))


def _match_image(dets, gts, thr: float, area_lo: float, area_hi: float):
    """Greedy matching for one image; returns (tp, ignore) flags per det.

    Each detection takes the best still-free ground truth with IoU >= thr,
    preferring real boxes over ignored ones; equal IoU keeps the earliest
    in (non-ignored first, box content) order.
    """
    gt_ignore = [not area_lo <= _box_area(g["bbox"]) < area_hi for g in gts]
    gt_order = sorted(range(len(gts)),
                      key=lambda i: (gt_ignore[i],
                                     tuple(map(float, gts[i]["bbox"]))))
    gt_taken = [False] * len(gts)
    tp = [False] * len(dets)
    ignore = [False] * len(dets)
    for di, d in enumerate(dets):
        best = min(thr, 1.0 - 1e-10)
        match = -1
        for gi in gt_order:
            if gt_taken[gi]:
                continue
            if match > -1 and not gt_ignore[match] and gt_ignore[gi]:
                break
            overlap = iou(d["bbox"], gts[gi]["bbox"])
            if overlap < best:
                continue
            best = overlap
            match = gi
        if match > -1:
            gt_taken[match] = True
            if gt_ignore[match]:
                ignore[di] = True
            else:
                tp[di] = True
        else:
            area = _box_area(d["bbox"])
            ignore[di] = not area_lo <= area < area_hi
    return tp, ignore


def _interpolated_ap(tp, ignore, npig: int) -> float:
    """101-point interpolation; flags must already be in score order."""
    tps = np.array([t for t, ig in zip(tp, ignore) if not ig],
                   dtype=np.float64)
    if tps.size == 0:
        return 0.0
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(1.0 - tps)
    recall = tp_cum / npig
    precision = tp_cum / (tp_cum + fp_cum)
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision),
                 precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(np.mean(q))


def average_precision(preds, gts, iou_threshold: float, area_range=None):
    """AP for one pooled class; None when no countable ground truth.

    `area_range` is an (inclusive-low, exclusive-high) pixel-area window;
    ground truth and stray detections outside it are ignored, not
    penalized. Category fields are not consulted; callers filter first.
    """
    lo, hi = area_range if area_range is not None else AREA_RANGES["all"]
    npig = sum(1 for g in gts if lo <= _box_area(g["bbox"]) < hi)
    if npig == 0:
        return None

    order = sorted(range(len(preds)), key=lambda i: _det_key(preds[i]))
    tp = [False] * len(preds)
    ignore = [False] * len(preds)
    image_ids = {p["image_id"] for p in preds} | {g["image_id"] for g in gts}
    for img in sorted(image_ids):
        idx_i = [i for i in order if preds[i]["image_id"] == img]
        gts_i = [g for g in gts if g["image_id"] == img]
        tp_i, ig_i = _match_image([preds[i] for i in idx_i], gts_i,
                                  iou_threshold, lo, hi)
        for j, i in enumerate(idx_i):
            tp[i] = tp_i[j]
            ignore[i] = ig_i[j]
    return _interpolated_ap([tp[i] for i in order],
                            [ignore[i] for i in order], npig)


def _mean_or_zero(values) -> float:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else 0.0


def coco_summary(preds, gts) -> EvalReport:
    """Full report: thresholds 0.50:0.05:0.95, category means, area buckets.

    Categories absent from the ground truth contribute nothing; within a
    category, an area bucket with no ground truth is skipped rather than
    scored zero. An empty ground-truth set yields all zeros.
    """
    categories = sorted({g["category_id"] for g in gts})
    if not categories:
        return EvalReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, {})
    by_cat_preds = {c: [p for p in preds if p["category_id"] == c]
                    for c in categories}
    by_cat_gts = {c: [g for g in gts if g["category_id"] == c]
                  for c in categories}

    per_threshold = {
        c: [average_precision(by_cat_preds[c], by_cat_gts[c], thr)
            for thr in IOU_THRESHOLDS]
        for c in categories
    }
    per_category = {c: _mean_or_zero(per_threshold[c]) for c in categories}

    def bucket(name):
        vals = []
        for c in categories:
            for thr in IOU_THRESHOLDS:
                vals.append(average_precision(by_cat_preds[c], by_cat_gts[c],
                                              thr, AREA_RANGES[name]))
        return _mean_or_zero(vals)

    return EvalReport(
        ap=_mean_or_zero(per_category.values()),
        ap50=_mean_or_zero(per_threshold[c][0] for c in categories),
        ap75=_mean_or_zero(per_threshold[c][5] for c in categories),
        ap_small=bucket("small"),
        ap_medium=bucket("medium"),
        ap_large=bucket("large"),
        per_category=per_category,
    )


def report_to_json(report: EvalReport) -> str:
    return canonical_json(report.to_dict())


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    buf.write("metric,value\n")
    d = report.to_dict()
    for key in ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large"):
        buf.write(f"{key},{d[key]:.17g}\n")
    for cat, val in sorted(report.per_category.items()):
        buf.write(f"ap_category_{cat},{val:.17g}\n")
    return buf.getvalue()
