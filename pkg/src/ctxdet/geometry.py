"""Axis-aligned box geometry: IoU/GIoU, conversions, pyramid levels, NMS.

Boxes are float arrays in xyxy order unless a name says otherwise.
Degenerate (zero-area) boxes are legal everywhere: IoU with anything is
0 unless both boxes are the same degenerate point, in which case the
union is 0 and IoU is defined as 0 too.

Everything here is plain float64 numpy with no gradient tracking; the
loss module carries its own differentiable twins of iou/giou and uses
these as the numeric cross-check.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def canonicalize_xyxy(boxes):
    """Reorder corners so x1 <= x2 and y1 <= y2, rowwise."""
    b = np.asarray(boxes, dtype=np.float64)
    out = b.copy()
    out[..., 0] = np.minimum(b[..., 0], b[..., 2])
    out[..., 2] = np.maximum(b[..., 0], b[..., 2])
    out[..., 1] = np.minimum(b[..., 1], b[..., 3])
    out[..., 3] = np.maximum(b[..., 1], b[..., 3])
    return out


def xyxy_to_cxcywh(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    cx = (b[..., 0] + b[..., 2]) / 2.0
    cy = (b[..., 1] + b[..., 3]) / 2.0
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return np.stack([cx, cy, w, h], axis=-1)


def cxcywh_to_xyxy(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    hw = b[..., 2] / 2.0
    hh = b[..., 3] / 2.0
    return np.stack([b[..., 0] - hw, b[..., 1] - hh,
                     b[..., 0] + hw, b[..., 1] + hh], axis=-1)


def box_area(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    return np.maximum(b[..., 2] - b[..., 0], 0.0) * np.maximum(b[..., 3] - b[..., 1], 0.0)


def iou(a, b):
    """Pairwise IoU of a[..,4] against b[..,4]; 0 when the union has no area."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    inter = np.maximum(ix2 - ix1, 0.0) * np.maximum(iy2 - iy1, 0.0)
    union = box_area(a) + box_area(b) - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def giou(a, b):
    """Generalized IoU: iou − |C \\ (A∪B)| / |C| with C the enclosing box."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    inter = np.maximum(ix2 - ix1, 0.0) * np.maximum(iy2 - iy1, 0.0)
    union = box_area(a) + box_area(b) - inter
    iou_val = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    cx1 = np.minimum(a[..., 0], b[..., 0])
    cy1 = np.minimum(a[..., 1], b[..., 1])
    cx2 = np.maximum(a[..., 2], b[..., 2])
    cy2 = np.maximum(a[..., 3], b[..., 3])
    hull = (cx2 - cx1) * (cy2 - cy1)
    penalty = np.where(hull > 0.0, (hull - union) / np.where(hull > 0.0, hull, 1.0), 0.0)
    return iou_val - penalty


def iou_matrix(a, b):
    """All-pairs IoU: a[M,4] x b[N,4] -> [M,N]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return iou(a[:, None, :], b[None, :, :])


def giou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return giou(a[:, None, :], b[None, :, :])


def assign_fpn_level(boxes, s_base=224.0):
    """Pyramid level floor(log2(sqrt(area)/s_base)) + 4, clamped to [1,5].

    Zero-area boxes land on level 1 by convention.
    """
    area = box_area(boxes)
    level = np.full(np.shape(area), 1, dtype=np.int64)
    pos = area > 0.0
    scale = np.sqrt(np.where(pos, area, 1.0))
    raw = np.floor(np.log2(scale / s_base)).astype(np.int64) + 4
    level = np.where(pos, np.clip(raw, 1, 5), level)
    if np.ndim(level) == 0:
        return int(level)
    return level


def nms(boxes, scores, iou_threshold=0.5):
    """Greedy non-maximum suppression; returns kept indices.

    Boxes are visited in descending score order (lower index wins ties);
    a box is kept iff its IoU with every already-kept box is <= threshold.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.shape[0] != scores.shape[0]:
        raise ShapeError(f"nms got {boxes.shape[0]} boxes but {scores.shape[0]} scores")
    n = boxes.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    # stable sort on negated scores: equal scores keep ascending index order
    order = np.argsort(-scores, kind="stable")
    kept = []
    suppressed = np.zeros(n, dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        kept.append(idx)
        overlaps = iou(boxes[idx][None, :], boxes)
        suppressed |= overlaps > iou_threshold
    return np.asarray(kept, dtype=np.int64)
