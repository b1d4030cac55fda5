"""Set-prediction losses: focal, L1, GIoU, bipartite matching, total loss.

The matching side (cost matrix, Hungarian assignment) runs on plain
numpy and is treated as non-differentiable: the assignment is
recomputed from current predictions every step and gradients never flow
through it. The loss side runs on tape Tensors.

Scalar totals are accumulated with `fsum`/value-sorted summation so the
result is bit-identical under any permutation of proposals or ground
truths; without that, pairwise float addition would leak input order
into the last ulp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class MatchWeights:
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_l1, self.lambda_giou) < 0:
            raise ContractError("matching weights must be nonnegative")
        if max(self.lambda_cls, self.lambda_l1, self.lambda_giou) <= 0:
            raise ContractError("at least one matching weight must be positive")


@dataclass(frozen=True)
class Assignment:
    """Proposal-to-GT pairing: every GT exactly once, proposals at most once."""

    pairs: tuple = field(default_factory=tuple)  # (proposal idx, gt idx)
    unmatched: tuple = field(default_factory=tuple)  # proposal indices

    def __post_init__(self):
        props = [p for p, _ in self.pairs]
        gts = [g for _, g in self.pairs]
        if len(set(gts)) != len(gts):
            raise ContractError("a gt index appears more than once in assignment")
        if len(set(props)) != len(props) or set(props) & set(self.unmatched):
            raise ContractError("a proposal index appears more than once in assignment")


def canonical_sum(x: Tensor) -> Tensor:
    """Order-independent total: addends sorted by value before summation."""
    if x.data.size == 0:
        return Tensor(0.0)
    flat = T.reshape(x, (-1,))
    order = np.argsort(flat.data, kind="stable")
    return T.tsum(T.take(flat, order))


def focal_loss(p, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise binary focal term on probabilities clamped to [1e-7, 1-1e-7].

    target=1: -alpha * (1-p)^gamma * log(p)
    target=0: -(1-alpha) * p^gamma * log(1-p)
    """
    p = T.clamp(T.as_tensor(p), 1e-7, 1.0 - 1e-7)
    tgt = np.asarray(target, dtype=np.float64)
    one_m_p = T.sub(1.0, p)
    pow_pos = T.exp(T.mul(gamma, T.log(one_m_p)))
    pow_neg = T.exp(T.mul(gamma, T.log(p)))
    pos = T.mul(-alpha, T.mul(pow_pos, T.log(p)))
    neg = T.mul(-(1.0 - alpha), T.mul(pow_neg, T.log(one_m_p)))
    return T.add(T.mul(Tensor(tgt), pos), T.mul(Tensor(1.0 - tgt), neg))


def _split_xyxy(b: Tensor):
    return (T.take(b, (Ellipsis, 0)), T.take(b, (Ellipsis, 1)),
            T.take(b, (Ellipsis, 2)), T.take(b, (Ellipsis, 3)))


def l1_pairs(a: Tensor, b) -> Tensor:
    """Per-row L1 distance between paired boxes [K,4] x [K,4] -> [K]."""
    return T.tsum(T.absolute(T.sub(a, T.as_tensor(b))), axis=-1)


def iou_pairs(a: Tensor, b) -> Tensor:
    """Differentiable rowwise IoU; degenerate unions floor at 1e-12."""
    b = T.as_tensor(b)
    ax1, ay1, ax2, ay2 = _split_xyxy(a)
    bx1, by1, bx2, by2 = _split_xyxy(b)
    iw = T.relu(T.sub(T.minimum(ax2, bx2), T.maximum(ax1, bx1)))
    ih = T.relu(T.sub(T.minimum(ay2, by2), T.maximum(ay1, by1)))
    inter = T.mul(iw, ih)
    area_a = T.mul(T.relu(T.sub(ax2, ax1)), T.relu(T.sub(ay2, ay1)))
    area_b = T.mul(T.relu(T.sub(bx2, bx1)), T.relu(T.sub(by2, by1)))
    union = T.sub(T.add(area_a, area_b), inter)
    return T.div(inter, T.maximum(union, Tensor(np.full(union.shape, 1e-12))))


def giou_pairs(a: Tensor, b) -> Tensor:
    """Differentiable rowwise GIoU matching the plain-float reference."""
    b = T.as_tensor(b)
    ax1, ay1, ax2, ay2 = _split_xyxy(a)
    bx1, by1, bx2, by2 = _split_xyxy(b)
    iw = T.relu(T.sub(T.minimum(ax2, bx2), T.maximum(ax1, bx1)))
    ih = T.relu(T.sub(T.minimum(ay2, by2), T.maximum(ay1, by1)))
    inter = T.mul(iw, ih)
    area_a = T.mul(T.relu(T.sub(ax2, ax1)), T.relu(T.sub(ay2, ay1)))
    area_b = T.mul(T.relu(T.sub(bx2, bx1)), T.relu(T.sub(by2, by1)))
    union = T.sub(T.add(area_a, area_b), inter)
    iou = T.div(inter, T.maximum(union, Tensor(np.full(union.shape, 1e-12))))
    hw = T.sub(T.maximum(ax2, bx2), T.minimum(ax1, bx1))
    hh = T.sub(T.maximum(ay2, by2), T.minimum(ay1, by1))
    hull = T.mul(hw, hh)
    penalty = T.div(T.sub(hull, union),
                    T.maximum(hull, Tensor(np.full(hull.shape, 1e-12))))
    return T.sub(iou, penalty)


def matching_cost(pred_probs, pred_boxes, gt_classes, gt_boxes,
                  w: MatchWeights) -> np.ndarray:
    """Pairwise cost [N, M]; classification uses focal against target 1.

    `pred_probs` are post-sigmoid class probabilities [N, C]; boxes xyxy in
    one shared normalized frame.
    """
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = pred_boxes.shape[0]
    m = gt_boxes.shape[0]
    if m == 0:
        return np.zeros((n, 0))
    p = pred_probs[:, gt_classes]  # [N, M]
    cls = focal_loss(Tensor(p), np.ones_like(p)).data
    l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    g = giou_pairs(Tensor(pred_boxes[:, None, :]), Tensor(gt_boxes[None, :, :])).data
    return w.lambda_cls * cls + w.lambda_l1 * l1 + w.lambda_giou * (1.0 - g)


def _solved_total(cost, rows, cols) -> float:
    return math.fsum(cost[r, c] for r, c in zip(rows, cols))


def _lexicographically_smallest(cost, best_total):
    """Smallest pair list (sorted by proposal index) among all optima.

    Greedy per row: the earliest row that can belong to some optimal
    assignment takes its smallest compatible gt column. Totals are fsum
    (exactly rounded), so optimality comparisons are order-independent.
    """
    n, m = cost.shape
    rows_left = list(range(n))
    cols_left = list(range(m))
    fixed = []
    fixed_cost = []
    for i in range(n):
        if not cols_left:
            break
        sub_rows = [r for r in rows_left if r != i]
        chosen = None
        for j in cols_left:
            sub_cols = [c for c in cols_left if c != j]
            if sub_cols:
                sub = cost[np.ix_(sub_rows, sub_cols)]
                rr, cc = linear_sum_assignment(sub)
                rest = [sub[a, b] for a, b in zip(rr, cc)]
            else:
                rest = []
            total = math.fsum(fixed_cost + [cost[i, j]] + rest)
            if total == best_total:
                chosen = j
                break
        if chosen is None:
            rows_left.remove(i)
        else:
            fixed.append((i, chosen))
            fixed_cost.append(cost[i, chosen])
            rows_left.remove(i)
            cols_left.remove(chosen)
    return fixed


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of every gt column to a distinct proposal row.

    Requires N >= M. Among equal-cost optima the lexicographically smallest
    pair list wins; uniqueness is probed by re-solving with each chosen edge
    forbidden, and the exact refinement only runs when a tie exists.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix contains non-finite entries")
    n, m = cost.shape
    if m == 0:
        return Assignment(pairs=(), unmatched=tuple(range(n)))
    if n < m:
        raise ContractError(f"need at least as many proposals as gts, got {n} < {m}")

    rows, cols = linear_sum_assignment(cost)
    best_total = _solved_total(cost, rows, cols)

    tie = False
    for r, c in zip(rows, cols):
        forbidden = cost.copy()
        forbidden[r, c] = np.inf
        try:
            rr, cc = linear_sum_assignment(forbidden)
        except ValueError:  # no feasible alternative avoiding this edge
            continue
        if np.isinf(forbidden[rr, cc]).any():
            continue
        if _solved_total(cost, rr, cc) == best_total:
            tie = True
            break

    if tie:
        pairs = _lexicographically_smallest(cost, best_total)
    else:
        pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched_rows = {p for p, _ in pairs}
    unmatched = tuple(i for i in range(n) if i not in matched_rows)
    return Assignment(pairs=tuple(pairs), unmatched=unmatched)


def assignment_total(cost, assignment: Assignment) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return math.fsum(cost[p, g] for p, g in assignment.pairs)


def set_loss(logits: Tensor, boxes: Tensor, gt_classes, gt_boxes,
             assignment: Assignment, w: MatchWeights,
             alpha: float = 0.25, gamma: float = 2.0,
             eps_pred: Tensor = None, eps_true=None, lambda_eps: float = 0.0):
    """Single-image set loss; returns (total, components dict of Tensors).

    Matched proposals take a one-hot class target, all other proposals an
    all-background target; box terms cover matched pairs only. Everything
    is normalized by max(1, number of gts).
    """
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n, c = logits.shape
    m = gt_boxes.shape[0]
    norm = float(max(1, m))

    target = np.zeros((n, c))
    for p, g in assignment.pairs:
        target[p, gt_classes[g]] = 1.0
    probs = T.sigmoid(logits)
    cls_elem = focal_loss(probs, target, alpha, gamma)
    cls = T.div(canonical_sum(T.tsum(cls_elem, axis=-1)), norm)

    if assignment.pairs:
        prop_idx = np.array([p for p, _ in assignment.pairs], dtype=np.int64)
        gt_idx = np.array([g for _, g in assignment.pairs], dtype=np.int64)
        pb = T.take(boxes, prop_idx)
        gb = gt_boxes[gt_idx]
        l1 = T.div(canonical_sum(l1_pairs(pb, gb)), norm)
        gi = T.div(canonical_sum(T.sub(1.0, giou_pairs(pb, gb))), norm)
    else:
        l1 = Tensor(0.0)
        gi = Tensor(0.0)

    parts = {"cls": cls, "l1": l1, "giou": gi}
    total = T.add(T.add(T.mul(w.lambda_cls, cls), T.mul(w.lambda_l1, l1)),
                  T.mul(w.lambda_giou, gi))

    if lambda_eps > 0.0 and assignment.pairs and eps_pred is not None:
        ep = T.take(eps_pred, prop_idx)
        et = np.asarray(eps_true, dtype=np.float64)[prop_idx]
        diff = T.sub(ep, et)
        mse = T.div(canonical_sum(T.tmean(T.mul(diff, diff), axis=-1)), norm)
        parts["eps"] = mse
        total = T.add(total, T.mul(lambda_eps, mse))

    return total, parts
