"""Optimal bipartite assignment and the detection matching cost."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ConfigError, DimensionError, NumericError
from .geometry import cxcywh_to_xyxy, pairwise_giou


@dataclass(frozen=True)
class CostWeights:
    cls: float = 2.0
    bbox: float = 5.0
    giou: float = 2.0
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if min(self.cls, self.bbox, self.giou) < 0:
            raise ConfigError("cost weights must be nonnegative")


def _shortest_augmenting_path(cost: np.ndarray):
    """Rows <= cols. Returns (col_of_row, row_potential, col_potential)."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _solve(cost: np.ndarray):
    """Any shape. Returns (pairs as (row, col) arrays, row duals, col duals)."""
    n, m = cost.shape
    if n <= m:
        cols, u, v = _shortest_augmenting_path(cost)
        return np.arange(n), cols, u, v
    rows_t, u_t, v_t = _shortest_augmenting_path(cost.T)
    order = np.argsort(rows_t)
    return rows_t[order], np.arange(m)[order], v_t, u_t


def _optimal_total(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    r, c, _, _ = _solve(cost)
    return float(cost[r, c].sum())


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost matching of size min(N, M) for an N x M cost matrix.

    Among equally optimal matchings the lexicographically smallest sorted
    pair list is returned, so ties resolve deterministically.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost must be a matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise NumericError("hungarian: cost matrix contains non-finite entries")
    rows, cols, u, v = _solve(cost)
    assign = np.full(n, -1, dtype=np.int64)
    assign[rows] = cols
    tol = 1e-9 * (1.0 + float(np.max(np.abs(cost))))
    tight = cost - u[:, None] - v[None, :] <= tol
    if int(tight.sum()) > min(n, m):
        assign = _lexicographic_refine(cost, assign, tight, tol)
    return [(int(i), int(j)) for i, j in enumerate(assign) if j >= 0]


def _lexicographic_refine(cost, assign, tight, tol):
    """Greedy row-by-row choice of the smallest feasible tight column."""
    n, m = cost.shape
    target = min(n, m)
    best = float(cost[np.arange(n)[assign >= 0], assign[assign >= 0]].sum())
    fixed_sum, fixed_matched = 0.0, 0
    used_cols = np.zeros(m, dtype=bool)
    for i in range(n):
        current = assign[i]
        options = [int(j) for j in np.flatnonzero(tight[i] & ~used_cols)]
        if n > m:
            options.append(-1)  # leaving the row unmatched sorts after any pair for it
        for choice in options:
            if choice == current:
                break
            taken = used_cols.copy()
            extra = 0.0
            matched = fixed_matched
            if choice >= 0:
                taken[choice] = True
                extra = cost[i, choice]
                matched += 1
            rest_rows = np.arange(i + 1, n)
            rest_cols = np.flatnonzero(~taken)
            if matched + min(rest_rows.size, rest_cols.size) != target:
                continue
            sub = cost[np.ix_(rest_rows, rest_cols)]
            if fixed_sum + extra + _optimal_total(sub) <= best + tol:
                assign[i] = choice
                assign[i + 1 :] = -1
                if sub.size:
                    r, c, _, _ = _solve(sub)
                    assign[rest_rows[r]] = rest_cols[c]
                break
        if assign[i] >= 0:
            used_cols[assign[i]] = True
            fixed_sum += cost[i, assign[i]]
            fixed_matched += 1
    return assign


def class_cost(logits: np.ndarray, labels: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Focal-weighted positive minus negative class cost, [Q, G]."""
    prob = special.expit(np.asarray(logits, dtype=np.float64))[:, labels]
    neg = (1 - alpha) * prob**gamma * -np.log(1 - prob + 1e-8)
    pos = alpha * (1 - prob) ** gamma * -np.log(prob + 1e-8)
    return pos - neg


def cost_matrix(logits: np.ndarray, boxes: np.ndarray, gt_labels: np.ndarray, gt_boxes: np.ndarray,
                weights: CostWeights = CostWeights()) -> np.ndarray:
    """Matching cost between Q predictions (cxcywh) and G ground truths (cxcywh)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    if gt_labels.size == 0:
        return np.zeros((boxes.shape[0], 0))
    cls = class_cost(logits, gt_labels, weights.alpha, weights.gamma)
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    g = pairwise_giou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt_boxes))
    return weights.cls * cls + weights.bbox * l1 + weights.giou * (1.0 - g)


def match(logits: np.ndarray, boxes: np.ndarray, gt_labels: np.ndarray, gt_boxes: np.ndarray,
          weights: CostWeights = CostWeights()) -> list[tuple[int, int]]:
    """(prediction index, ground-truth index) pairs for one image."""
    if len(gt_labels) == 0:
        return []
    return hungarian(cost_matrix(logits, boxes, gt_labels, gt_boxes, weights))
