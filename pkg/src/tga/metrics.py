"""Precision / recall / F1 / panoptic quality at instance and paragraph level."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .matching import hungarian

TP_IOU = 0.5
REPORT_KEYS = ("precision", "recall", "f1", "pq", "tp", "fp", "fn", "mean_tp_iou")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"mask shapes differ: {np.shape(a)} vs {np.shape(b)}")
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = (a | b).sum()
    return 0.0 if union == 0 else float((a & b).sum()) / float(union)


def iou_matrix(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    p = (np.asarray(preds) > 0.5).reshape(len(preds), -1).astype(np.float64)
    g = (np.asarray(gts) > 0.5).reshape(len(gts), -1).astype(np.float64)
    inter = p @ g.T
    union = p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass
class LevelStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def __add__(self, other: "LevelStats") -> "LevelStats":
        return LevelStats(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                          self.iou_sum + other.iou_sum)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def mean_tp_iou(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def pq(self) -> float:
        return self.f1 * self.mean_tp_iou

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "pq": self.pq,
                "tp": self.tp, "fp": self.fp, "fn": self.fn, "mean_tp_iou": self.mean_tp_iou}


def match_masks(preds: np.ndarray, gts: np.ndarray) -> LevelStats:
    """One-to-one matching maximizing total IoU; pairs with IoU > 0.5 are true positives."""
    n_p, n_g = len(preds), len(gts)
    if n_p == 0 or n_g == 0:
        return LevelStats(0, n_p, n_g, 0.0)
    ious = iou_matrix(preds, gts)
    assignment = hungarian(1.0 - ious)
    tp_ious = [ious[p, g] for p, g in assignment.pairs.items() if ious[p, g] > TP_IOU]
    tp = len(tp_ious)
    return LevelStats(tp, n_p - tp, n_g - tp, float(np.sum(tp_ious)) if tp else 0.0)


@dataclass
class EvalReport:
    levels: dict[str, LevelStats] = field(default_factory=dict)

    def __add__(self, other: "EvalReport") -> "EvalReport":
        names = list(dict.fromkeys([*self.levels, *other.levels]))
        return EvalReport({n: self.levels.get(n, LevelStats()) + other.levels.get(n, LevelStats())
                           for n in names})

    def __getitem__(self, level: str) -> LevelStats:
        return self.levels[level]

    def as_dict(self) -> dict:
        return {name: stats.as_dict() for name, stats in self.levels.items()}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def paragraph_masks(instance_masks: np.ndarray, partition: list[list[int]]) -> np.ndarray:
    """Union of member instance masks for every predicted group."""
    if not partition:
        return np.zeros((0, *instance_masks.shape[1:]))
    return np.asarray([np.clip(instance_masks[g].sum(axis=0), 0, 1) for g in partition])


def evaluate(pred_masks: np.ndarray, partition: list[list[int]], gt, instance_level: str,
             group_level: str = "paragraph") -> EvalReport:
    """Score predicted instances and their grouping against an annotation.

    ``pred_masks`` are full-resolution instance masks; ``partition`` lists
    indices into it.  Instances outside the partition are not scored.
    Ground-truth groups are unions of the ground-truth instance masks.
    """
    try:
        gt_inst = gt.masks(instance_level)
        gt_groups = gt.group_masks(instance_level, group_level)
    except ValueError as exc:
        raise ValueError(f"ground truth lacks level {instance_level}/{group_level}: {exc}") from None
    used = sorted(i for g in partition for i in g)
    inst = match_masks(np.asarray(pred_masks)[used] if used else np.zeros((0,)), gt_inst)
    para = match_masks(paragraph_masks(np.asarray(pred_masks), partition), gt_groups)
    return EvalReport({"instance": inst, "paragraph": para})


def aggregate(reports) -> EvalReport:
    """Micro-average: sum counts over scenes, ratios follow from the sums."""
    total = EvalReport({"instance": LevelStats(), "paragraph": LevelStats()})
    for r in reports:
        total = total + r
    return total
