"""Instance matching and one-to-many group targets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import downsample_mask


@dataclass
class Assignment:
    pairs: dict[int, int]          # predicted index -> ground-truth index
    cost: float
    num_preds: int = 0
    num_gts: int = 0

    def inverse(self) -> dict[int, int]:
        return {g: p for p, g in self.pairs.items()}


@dataclass
class GroupTargets:
    group_masks: np.ndarray        # [N, H', W']
    affinity: np.ndarray           # [N, N] in {0, 1}
    weight: np.ndarray             # [N, N] in {0, 1}
    matched: np.ndarray            # [N] bool
    gt_index: np.ndarray = field(default=None)  # [N] matched gt instance or -1
    group_index: np.ndarray = field(default=None)  # [N] gt group or -1


def hungarian(cost) -> Assignment:
    """Minimum-cost injective assignment of min(rows, cols) pairs.

    Shortest augmenting paths with row/column potentials, O(n^3).  Rows are
    inserted in index order and every argmin keeps the lowest column, so the
    result is deterministic.  Rectangular inputs are padded to square with a
    constant sentinel cost; padded pairs are never reported.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {c.shape}")
    n_rows, n_cols = c.shape
    if n_rows == 0 or n_cols == 0:
        return Assignment({}, 0.0, n_rows, n_cols)
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    n = max(n_rows, n_cols)
    sentinel = float(np.abs(c).max()) * 2.0 + 1.0
    a = np.full((n, n), sentinel)
    a[:n_rows, :n_cols] = c

    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)      # column j (1-based) -> row (1-based), 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    pairs = {}
    for j in range(1, n + 1):
        r, col = p[j] - 1, j - 1
        if r < n_rows and col < n_cols:
            pairs[int(r)] = int(col)
    pairs = dict(sorted(pairs.items()))
    total = float(sum(c[r, g] for r, g in pairs.items()))
    return Assignment(pairs, total, n_rows, n_cols)


def dice_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * float((a & b).sum()) / float(denom)


def match_cost(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    if np.shape(pred_mask) != np.shape(gt_mask):
        raise ValueError(f"mask shapes differ: {np.shape(pred_mask)} vs {np.shape(gt_mask)}")
    return 1.0 - dice_coefficient(pred_mask, gt_mask)


def dice_cost_matrix(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise ``match_cost`` for stacks [Np, H, W] x [Ng, H, W]."""
    p = (np.asarray(preds) > 0.5).reshape(len(preds), -1).astype(np.float64)
    g = (np.asarray(gts) > 0.5).reshape(len(gts), -1).astype(np.float64)
    inter = p @ g.T
    denom = p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        dice = np.where(denom > 0, 2.0 * inter / np.where(denom > 0, denom, 1.0), 1.0)
    return 1.0 - dice


CostFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def match_instances(pred_masks: np.ndarray, valid: np.ndarray, gt_masks: np.ndarray,
                    cost_fn: CostFn = dice_cost_matrix,
                    extra_cost: np.ndarray | None = None) -> Assignment:
    """Hungarian matching of valid predictions against ground-truth instances.

    ``extra_cost`` ([N, Ng], optional) is added to the mask cost, e.g. a
    classification-score term.  Returned indices refer to the padded slots.
    """
    slots = np.flatnonzero(valid)
    if len(slots) == 0 or len(gt_masks) == 0:
        return Assignment({}, 0.0, len(valid), len(gt_masks))
    cost = cost_fn(pred_masks[slots], gt_masks)
    if extra_cost is not None:
        cost = cost + np.asarray(extra_cost)[slots]
    sub = hungarian(cost)
    return Assignment({int(slots[r]): g for r, g in sub.pairs.items()}, sub.cost,
                      len(valid), len(gt_masks))


def assign_groups(assignment: Assignment, annotation, instance_level: str, group_level: str,
                  factor: int = 8) -> GroupTargets:
    """Lift instance matches to group targets: every member gets its group's mask."""
    try:
        group_of = annotation.group_of(instance_level, group_level)
    except ValueError as exc:
        raise ValueError(f"annotation has no {instance_level}->{group_level} structure: {exc}") from None
    if len(group_of) == 0:
        raise ValueError(f"annotation has no {instance_level} instances")
    gmasks = annotation.group_masks(instance_level, group_level)
    if factor > 1:
        gmasks = downsample_mask(gmasks, factor)
    n = assignment.num_preds
    h, w = gmasks.shape[1:]
    mg = np.zeros((n, h, w))
    matched = np.zeros(n, dtype=bool)
    gt_index = np.full(n, -1, dtype=np.int64)
    group_index = np.full(n, -1, dtype=np.int64)
    for i, g in assignment.pairs.items():
        if not 0 <= g < len(group_of):
            raise ValueError(f"assignment refers to ground-truth instance {g}, "
                             f"annotation has {len(group_of)}")
        matched[i] = True
        gt_index[i] = g
        group_index[i] = group_of[g]
        mg[i] = gmasks[group_of[g]]
    weight = np.outer(matched, matched).astype(np.float64)
    affinity = ((group_index[:, None] == group_index[None, :]) & (weight > 0)).astype(np.float64)
    return GroupTargets(mg, affinity, weight, matched, gt_index, group_index)


def build_targets(pred_masks: np.ndarray, valid: np.ndarray, annotation, instance_level: str,
                  group_level: str, factor: int = 8, gt_factor: int = 1) -> GroupTargets:
    """Match predictions to ground truth and assign group targets at 1/``factor``.

    ``gt_factor`` downsamples the ground-truth instance masks before matching,
    for predictions that are themselves at reduced resolution.
    """
    gts = annotation.masks(instance_level)
    if gt_factor > 1:
        gts = downsample_mask(gts, gt_factor)
    assignment = match_instances(pred_masks, valid, gts)
    return assign_groups(assignment, annotation, instance_level, group_level, factor)
