"""Bipartite matching and the pretraining/finetuning losses.

Matching runs on detached prediction values (the assignment is an argmin and
carries no gradient); the box/semantic/match losses are then built from tape
primitives on the matched rows. Costs combine a match-score term, a
generalized-IoU term, and an L1 term with coefficients (1, 2, 5); the same
(2, 5) pair weights the GIoU/L1 parts of the box regression loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

MATCH_COEF = (1.0, 2.0, 5.0)  # match-score, giou, l1
K_CLAMP = 1e-7


@dataclass(frozen=True)
class MatchAssignment:
    """Injective map target index -> prediction index."""

    target_to_pred: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.target_to_pred)) != len(self.target_to_pred):
            raise ValueError(f"assignment not injective: {self.target_to_pred}")

    def __len__(self) -> int:
        return len(self.target_to_pred)


@dataclass
class LossBreakdown:
    loc: float
    global_disc: float
    region_disc: float
    total: float
    lambdas: tuple[float, float, float]  # (region, global, loc)


# -- Hungarian matching ------------------------------------------------------------


def _solve_lap(cost: np.ndarray) -> tuple[list[int], float, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path assignment for an m x n matrix, m <= n.

    Returns (column of each row, total cost, row potentials, column
    potentials); the potentials are an optimal dual certificate:
    cost[i][j] >= u[i] + v[j] everywhere with equality on matched cells.
    Potentials-based O(m n^2).
    """
    m, n = cost.shape
    INF = np.inf
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based)
    for i in range(1, m + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        way = np.zeros(n + 1, dtype=np.int64)
        while True:
            used[j0] = True
            i0 = p[j0]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = ~used[1:] & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            free = np.where(~used[1:])[0]
            j1 = free[np.argmin(minv[1:][free])] + 1
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.zeros(m, dtype=np.int64)
    for j in range(1, n + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    total = float(cost[np.arange(m), cols].sum())
    return cols.tolist(), total, u[1:], v[1:]


def hungarian(cost_matrix) -> MatchAssignment:
    """Minimum-cost injective assignment of rows (targets) to columns.

    Requires m <= n (pad predictions, never targets). Among cost-optimal
    assignments, returns the lexicographically smallest vector
    (sigma(0), sigma(1), ...), so tie-breaking is deterministic across
    platforms.
    """
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    m, n = cost.shape
    if m > n:
        raise ValueError(f"more targets ({m}) than predictions ({n})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if m == 0:
        return MatchAssignment(())
    base_cols, best, u, v = _solve_lap(cost)
    tol = 1e-9 * (1.0 + abs(best))
    # cells with positive reduced cost w.r.t. the optimal dual cannot appear
    # in any optimal assignment (complementary slackness), so only zero-slack
    # columns are lexicographic candidates
    slack = cost - u[:, None] - v[None, :]

    assigned: list[int] = []
    free_cols = list(range(n))
    prefix = 0.0
    for i in range(m):
        rest_rows = np.arange(i + 1, m)
        candidates = [j for j in free_cols if slack[i, j] <= tol]
        if len(candidates) == 1:
            # a consistent optimal extension exists and must use a zero-slack
            # cell, so a lone candidate needs no verification
            j = candidates[0]
            prefix += cost[i, j]
            assigned.append(j)
            free_cols.remove(j)
            continue
        for j in candidates:
            trial_prefix = prefix + cost[i, j]
            if rest_rows.size:
                sub_cols = [c for c in free_cols if c != j]
                sub = cost[np.ix_(rest_rows, sub_cols)]
                completion = _solve_lap(sub)[1]
            else:
                completion = 0.0
            if trial_prefix + completion <= best + tol:
                assigned.append(j)
                free_cols.remove(j)
                prefix = trial_prefix
                break
        else:
            raise RuntimeError("no consistent column found; numerical tolerance too tight")
    return MatchAssignment(tuple(assigned))


# -- box math on arrays (matching costs; gradient-free) -------------------------------


def cxcywh_to_xyxy_array(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def giou_matrix(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    """Pairwise GIoU, (m, 4) x (n, 4) -> (m, n)."""
    area_a = (a_xyxy[:, 2] - a_xyxy[:, 0]) * (a_xyxy[:, 3] - a_xyxy[:, 1])
    area_b = (b_xyxy[:, 2] - b_xyxy[:, 0]) * (b_xyxy[:, 3] - b_xyxy[:, 1])
    lt = np.maximum(a_xyxy[:, None, :2], b_xyxy[None, :, :2])
    rb = np.minimum(a_xyxy[:, None, 2:], b_xyxy[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = np.where(union > 1e-9, inter / np.maximum(union, 1e-9), 0.0)
    lt_h = np.minimum(a_xyxy[:, None, :2], b_xyxy[None, :, :2])
    rb_h = np.maximum(a_xyxy[:, None, 2:], b_xyxy[None, :, 2:])
    wh_h = np.clip(rb_h - lt_h, 0, None)
    hull = wh_h[..., 0] * wh_h[..., 1]
    return np.where(hull > 1e-9, iou - (hull - union) / np.maximum(hull, 1e-9), iou)


def matching_cost(pred_boxes: np.ndarray, pred_match: np.ndarray,
                  target_boxes: np.ndarray,
                  coef: tuple[float, float, float] = MATCH_COEF) -> np.ndarray:
    """(m, N) matching cost; boxes in normalized cxcywh.

    cost[i][j] = -c0 log k_j + c1 (1 - GIoU(pred_j, tgt_i)) + c2 |pred_j - tgt_i|_1
    with k clamped away from {0, 1}.
    """
    k = np.clip(pred_match.reshape(-1), K_CLAMP, 1.0 - K_CLAMP)
    score_term = -coef[0] * np.log(k)[None, :]
    giou = giou_matrix(cxcywh_to_xyxy_array(target_boxes),
                       cxcywh_to_xyxy_array(pred_boxes))
    l1 = np.abs(target_boxes[:, None, :] - pred_boxes[None, :, :]).sum(axis=-1)
    return score_term + coef[1] * (1.0 - giou) + coef[2] * l1


# -- differentiable loss pieces --------------------------------------------------------


def _boxes_to_xyxy_t(boxes: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx = T.narrow(boxes, 1, 0, 1)
    cy = T.narrow(boxes, 1, 1, 1)
    w = T.narrow(boxes, 1, 2, 1)
    h = T.narrow(boxes, 1, 3, 1)
    half = Tensor(np.asarray(0.5, dtype=boxes.data.dtype))
    return (T.sub(cx, T.mul(w, half)), T.sub(cy, T.mul(h, half)),
            T.add(cx, T.mul(w, half)), T.add(cy, T.mul(h, half)))


def giou_pairs(pred_boxes: Tensor, target_boxes: np.ndarray) -> Tensor:
    """Rowwise GIoU between (k, 4) predictions and (k, 4) constant targets,
    both cxcywh; differentiable w.r.t. the predictions."""
    dt = pred_boxes.data.dtype
    px1, py1, px2, py2 = _boxes_to_xyxy_t(pred_boxes)
    t = cxcywh_to_xyxy_array(np.asarray(target_boxes, dtype=dt))
    tx1, ty1 = Tensor(t[:, 0:1]), Tensor(t[:, 1:2])
    tx2, ty2 = Tensor(t[:, 2:3]), Tensor(t[:, 3:4])
    iw = T.relu(T.sub(T.minimum(px2, tx2), T.maximum(px1, tx1)))
    ih = T.relu(T.sub(T.minimum(py2, ty2), T.maximum(py1, ty1)))
    inter = T.mul(iw, ih)
    area_p = T.mul(T.sub(px2, px1), T.sub(py2, py1))
    area_t = T.mul(T.sub(tx2, tx1), T.sub(ty2, ty1))
    eps = Tensor(np.asarray(1e-9, dtype=dt))
    union = T.add(T.sub(T.add(area_p, area_t), inter), eps)
    iou = T.div(inter, union)
    hw = T.sub(T.maximum(px2, tx2), T.minimum(px1, tx1))
    hh = T.sub(T.maximum(py2, ty2), T.minimum(py1, ty1))
    hull = T.add(T.mul(hw, hh), eps)
    giou = T.sub(iou, T.div(T.sub(hull, union), hull))
    return T.reshape(giou, (-1,))


def box_regression_loss(pred_boxes: Tensor, assignment: MatchAssignment,
                        target_boxes: np.ndarray,
                        giou_weight: float = MATCH_COEF[1],
                        l1_weight: float = MATCH_COEF[2]) -> Tensor:
    """Mean over matched pairs of giou_w * (1 - GIoU) + l1_w * |pred - tgt|_1."""
    if len(assignment) == 0:
        raise ValueError("box regression needs at least one matched pair")
    dt = pred_boxes.data.dtype
    matched = T.gather_rows(pred_boxes, list(assignment.target_to_pred))
    tgt = np.asarray(target_boxes, dtype=dt)
    giou = giou_pairs(matched, tgt)
    one = Tensor(np.ones_like(giou.data))
    giou_term = T.tmean(T.sub(one, giou))
    l1_term = T.tmean(T.tsum(T.absolute(T.sub(matched, Tensor(tgt))), axis=-1))
    return T.add(T.mul(giou_term, Tensor(np.asarray(giou_weight, dtype=dt))),
                 T.mul(l1_term, Tensor(np.asarray(l1_weight, dtype=dt))))


def match_bce_loss(pred_match: Tensor, assignment: MatchAssignment) -> Tensor:
    """Binary cross-entropy on the match head over all queries.

    Matched queries have target 1, the rest 0; mean over queries, weight 1.
    """
    n = pred_match.data.shape[0]
    targets = np.zeros((n, 1), dtype=pred_match.data.dtype)
    for j in assignment.target_to_pred:
        targets[j, 0] = 1.0
    k = T.clamp(T.reshape(pred_match, (n, 1)), K_CLAMP, 1.0 - K_CLAMP)
    t = Tensor(targets)
    ones = Tensor(np.ones_like(targets))
    ce = T.sub(Tensor(np.zeros_like(targets)),
               T.add(T.mul(t, T.log(k)), T.mul(T.sub(ones, t), T.log(T.sub(ones, k)))))
    return T.tmean(ce)


def loc_loss_direction(pred_boxes: Tensor, pred_match: Tensor,
                       assignment: MatchAssignment,
                       target_boxes: np.ndarray) -> Tensor:
    """One direction of the localization loss: matched box regression plus
    the match-head cross-entropy over all queries."""
    return T.add(box_regression_loss(pred_boxes, assignment, target_boxes),
                 match_bce_loss(pred_match, assignment))


def global_disc_loss(project_fn, pooled1: Tensor, pooled2: Tensor) -> Tensor:
    """Symmetric negative cosine between projected and detached pooled contexts.

    project_fn is applied to the live branch only; the target branch is
    detached, so no gradient reaches it.
    """
    a = T.tmean(T.cosine(project_fn(pooled1), pooled2.detach()))
    b = T.tmean(T.cosine(project_fn(pooled2), pooled1.detach()))
    return T.sub(Tensor(np.zeros((), dtype=pooled1.data.dtype)), T.add(a, b))


def region_disc_loss_direction(pred_sem: Tensor, target_features: np.ndarray,
                               assignment: MatchAssignment) -> Tensor:
    """Normalized-L2 reconstruction of region features for matched pairs.

    D(a, b) = |a/|a| - b/|b||^2 = 2 - 2 cos(a, b), averaged over pairs.
    Targets come from the frozen backbone and carry no gradient.
    """
    if len(assignment) == 0:
        raise ValueError("region discrimination needs at least one matched pair")
    dt = pred_sem.data.dtype
    matched = T.gather_rows(pred_sem, list(assignment.target_to_pred))
    tgt = np.asarray(target_features, dtype=np.float64)
    norms = np.linalg.norm(tgt, axis=-1, keepdims=True)
    if (norms <= 1e-12).any():
        raise ValueError("zero-norm target feature row")
    tgt_unit = Tensor((tgt / norms).astype(dt))
    diff = T.sub(T.l2_normalize(matched), tgt_unit)
    return T.tmean(T.tsum(T.mul(diff, diff), axis=-1))


def total_loss(loc: Tensor, global_disc: Tensor | None, region_disc: Tensor | None,
               lambdas: tuple[float, float, float]) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum; lambdas = (region, global, loc) following the loss form
    lambda0 * L_r + lambda1 * L_g + lambda2 * L_loc."""
    lam_r, lam_g, lam_loc = lambdas
    if lam_r < 0 or lam_g < 0 or lam_loc < 0:
        raise ValueError(f"negative loss weight: {lambdas}")
    dt = loc.data.dtype
    total = T.mul(loc, Tensor(np.asarray(lam_loc, dtype=dt)))
    g_val = 0.0
    if global_disc is not None and lam_g > 0:
        total = T.add(total, T.mul(global_disc, Tensor(np.asarray(lam_g, dtype=dt))))
        g_val = float(global_disc.data)
    elif global_disc is not None:
        g_val = float(global_disc.data)
    r_val = 0.0
    if region_disc is not None and lam_r > 0:
        total = T.add(total, T.mul(region_disc, Tensor(np.asarray(lam_r, dtype=dt))))
        r_val = float(region_disc.data)
    elif region_disc is not None:
        r_val = float(region_disc.data)
    breakdown = LossBreakdown(loc=float(loc.data), global_disc=g_val,
                              region_disc=r_val, total=float(total.data),
                              lambdas=lambdas)
    return total, breakdown


# -- finetuning set-prediction loss ------------------------------------------------------


def finetune_matching_cost(pred_boxes: np.ndarray, class_probs: np.ndarray,
                           target_boxes: np.ndarray, target_labels: np.ndarray,
                           coef: tuple[float, float, float] = MATCH_COEF) -> np.ndarray:
    """Finetuning cost: the probability of the true class stands in for the
    match score."""
    p_true = np.clip(class_probs[:, target_labels].T, K_CLAMP, 1.0)  # (m, N)
    giou = giou_matrix(cxcywh_to_xyxy_array(target_boxes),
                       cxcywh_to_xyxy_array(pred_boxes))
    l1 = np.abs(target_boxes[:, None, :] - pred_boxes[None, :, :]).sum(axis=-1)
    return -coef[0] * np.log(p_true) + coef[1] * (1.0 - giou) + coef[2] * l1


def finetune_set_loss(class_logits: Tensor, pred_boxes: Tensor,
                      target_boxes: np.ndarray, target_labels: np.ndarray,
                      n_classes: int, no_object_weight: float = 0.1
                      ) -> tuple[Tensor, MatchAssignment]:
    """DETR-style set prediction loss for labeled data.

    Cross-entropy over all queries (matched -> true class, unmatched -> the
    no-object class with down-weighted contribution, averaged over queries)
    plus GIoU/L1 regression on matched pairs.
    """
    n_queries = class_logits.data.shape[0]
    dt = class_logits.data.dtype
    no_object = n_classes  # last class index
    if len(target_labels):
        probs_np = _softmax_np(class_logits.data)
        cost = finetune_matching_cost(pred_boxes.data, probs_np,
                                      np.asarray(target_boxes), np.asarray(target_labels))
        assignment = hungarian(cost)
    else:
        assignment = MatchAssignment(())

    classes = np.full(n_queries, no_object, dtype=np.int64)
    weights = np.full((n_queries, 1), no_object_weight, dtype=dt)
    for i, j in enumerate(assignment.target_to_pred):
        classes[j] = target_labels[i]
        weights[j, 0] = 1.0
    onehot = np.zeros((n_queries, n_classes + 1), dtype=dt)
    onehot[np.arange(n_queries), classes] = 1.0

    probs = T.softmax(class_logits, axis=-1)
    logp = T.log(T.clamp(probs, 1e-9, 1.0))
    per_query = T.sub(Tensor(np.zeros((n_queries, 1), dtype=dt)),
                      T.tsum(T.mul(logp, Tensor(onehot)), axis=-1, keepdims=True))
    class_loss = T.tmean(T.mul(per_query, Tensor(weights)))

    if len(assignment):
        box_loss = box_regression_loss(pred_boxes, assignment, target_boxes)
        return T.add(class_loss, box_loss), assignment
    return class_loss, assignment


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
