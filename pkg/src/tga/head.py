"""Trainable grouping head: instance self-attention, group masks, affinities, losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .matching import GroupTargets
from .numerics import ParamStore, Tensor

AFFINITY_EPS = 1e-7


@dataclass
class AttentionConfig:
    dim: int = 256
    layers: int = 3
    heads: int = 4
    hidden: int = 512

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")


@dataclass
class LossWeights:
    dice: float = 1.0      # weight of the group-mask term
    group: float = 1.0     # weight of the affinity term
    det: float = 0.0       # detector loss; frozen-detector mode only

    def __post_init__(self):
        if min(self.dice, self.group, self.det) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.det != 0:
            raise ValueError("only frozen-detector mode is supported (detection weight must be 0)")


@dataclass
class GroupingConfig:
    threshold: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


# ---------------------------------------------------------------- self-attention

def attention_param_names(cfg: AttentionConfig, prefix: str = "sa") -> list[str]:
    names = []
    for l in range(cfg.layers):
        p = f"{prefix}.{l}"
        names += [f"{p}.ln1.g", f"{p}.ln1.b", f"{p}.ln2.g", f"{p}.ln2.b"]
        for m in ("q", "k", "v", "o"):
            names += [f"{p}.w{m}", f"{p}.b{m}"]
        names += [f"{p}.ff1.w", f"{p}.ff1.b", f"{p}.ff2.w", f"{p}.ff2.b"]
    return names


def init_attention_params(rng: np.random.Generator, cfg: AttentionConfig,
                          prefix: str = "sa", out_gain: float = 0.1) -> ParamStore:
    """Output projections start scaled by ``out_gain`` so every block begins near identity."""
    d, h = cfg.dim, cfg.hidden
    params = ParamStore()
    for l in range(cfg.layers):
        p = f"{prefix}.{l}"
        params[f"{p}.ln1.g"] = np.ones(d)
        params[f"{p}.ln1.b"] = np.zeros(d)
        params[f"{p}.ln2.g"] = np.ones(d)
        params[f"{p}.ln2.b"] = np.zeros(d)
        for m in ("q", "k", "v", "o"):
            gain = out_gain if m == "o" else 1.0
            params[f"{p}.w{m}"] = rng.standard_normal((d, d)) * (gain / math.sqrt(d))
            params[f"{p}.b{m}"] = np.zeros(d)
        params[f"{p}.ff1.w"] = rng.standard_normal((d, h)) * math.sqrt(2.0 / d)
        params[f"{p}.ff1.b"] = np.zeros(h)
        params[f"{p}.ff2.w"] = rng.standard_normal((h, d)) * (out_gain / math.sqrt(h))
        params[f"{p}.ff2.b"] = np.zeros(d)
    return params


def _attention(x: Tensor, params: ParamStore, p: str, heads: int, valid: np.ndarray) -> Tensor:
    n, d = x.shape
    dh = d // heads

    def split(t: Tensor) -> Tensor:  # [N, D] -> [heads, N, dh]
        return nx.transpose(nx.reshape(t, (n, heads, dh)), (1, 0, 2))

    q = split(x @ params[f"{p}.wq"] + params[f"{p}.bq"])
    k = split(x @ params[f"{p}.wk"] + params[f"{p}.bk"])
    v = split(x @ params[f"{p}.wv"] + params[f"{p}.bv"])
    scores = nx.matmul(q, nx.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    weights = nx.softmax(scores, mask=valid[None, None, :])
    ctx = nx.matmul(weights, v)                                   # [heads, N, dh]
    ctx = nx.reshape(nx.transpose(ctx, (1, 0, 2)), (n, d))
    return ctx @ params[f"{p}.wo"] + params[f"{p}.bo"]


def self_attention_update(feats: Tensor, params: ParamStore, valid, cfg: AttentionConfig,
                          prefix: str = "sa") -> Tensor:
    """Pre-norm transformer blocks over instances; padded slots are ignored as keys
    and zeroed on output."""
    valid = np.asarray(valid, dtype=bool)
    if feats.shape[0] < 1:
        raise ValueError("need at least one instance slot")
    if not valid.any():
        raise ValueError("self-attention needs at least one valid instance")
    if feats.shape[1] != cfg.dim:
        raise ValueError(f"feature dim {feats.shape[1]} does not match attention dim {cfg.dim}")
    params.require(attention_param_names(cfg, prefix))
    keep = Tensor(valid.astype(np.float64)[:, None])
    x = feats * keep
    for l in range(cfg.layers):
        p = f"{prefix}.{l}"
        h = nx.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        x = x + _attention(h, params, p, cfg.heads, valid)
        h = nx.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        h = nx.relu(h @ params[f"{p}.ff1.w"] + params[f"{p}.ff1.b"])
        x = x + (h @ params[f"{p}.ff2.w"] + params[f"{p}.ff2.b"])
    return x * keep


# ---------------------------------------------------------------- predictions

def group_mask_logits(feats: Tensor, P: Tensor) -> Tensor:
    n, d = feats.shape
    if P.shape[0] != d:
        raise ValueError(f"instance dim {d} does not match pixel embedding channels {P.shape[0]}")
    _, h, w = P.shape
    return nx.reshape(feats @ nx.reshape(P, (d, h * w)), (n, h, w))


def predict_group_masks(feats: Tensor, P: Tensor) -> Tensor:
    """Per-instance group-mask probabilities: logistic of feature . pixel embedding."""
    return nx.sigmoid(group_mask_logits(feats, P))


def predict_affinity(feats: Tensor) -> Tensor:
    """logistic(F F^T / sqrt(D)), symmetrised so the result is exactly symmetric."""
    d = feats.shape[1]
    gram = (feats @ nx.transpose(feats)) * (1.0 / math.sqrt(d))
    gram = (gram + nx.transpose(gram)) * 0.5
    return nx.sigmoid(gram)


# ---------------------------------------------------------------- losses

def dice_loss(pred: Tensor, targets: GroupTargets) -> Tensor:
    """1 - 2 sum<M, M^> / (sum |M|^2 + sum |M^|^2) over matched instances (one global ratio)."""
    if pred.shape != targets.group_masks.shape:
        raise ValueError(f"prediction {pred.shape} vs target {targets.group_masks.shape}")
    rows = np.flatnonzero(targets.matched)
    if len(rows) == 0:
        return Tensor(0.0)
    p = pred[rows]
    t = Tensor(targets.group_masks[rows])
    num = nx.sum(p * t) * 2.0
    den = nx.sum(p * p) + float(np.sum(targets.group_masks[rows] ** 2))
    return 1.0 - num / den


def mask_bce_loss(pred: Tensor, targets: GroupTargets) -> Tensor:
    """Mean pixel-wise binary cross-entropy over matched instances."""
    rows = np.flatnonzero(targets.matched)
    if len(rows) == 0:
        return Tensor(0.0)
    p = nx.clamp(pred[rows], AFFINITY_EPS, 1.0 - AFFINITY_EPS)
    t = targets.group_masks[rows]
    ll = nx.log(p) * t + nx.log(1.0 - p) * (1.0 - t)
    return -nx.mean(ll)


def mask_loss(pred: Tensor, targets: GroupTargets, kind: str = "dice") -> Tensor:
    if kind == "dice":
        return dice_loss(pred, targets)
    if kind == "bce":
        return mask_bce_loss(pred, targets)
    if kind == "both":
        return dice_loss(pred, targets) + mask_bce_loss(pred, targets)
    raise ValueError(f"unknown mask loss {kind!r}")


def affinity_loss(affinity: Tensor, targets: GroupTargets, eps: float = AFFINITY_EPS) -> Tensor:
    """Binary cross-entropy on C-weighted pairs, normalised by max(1, sum C)."""
    if affinity.shape != targets.affinity.shape:
        raise ValueError(f"affinity {affinity.shape} vs target {targets.affinity.shape}")
    c = targets.weight
    total = float(c.sum())
    if total == 0:
        return Tensor(0.0)
    a = targets.affinity
    p = nx.clamp(affinity, eps, 1.0 - eps)
    ll = nx.log(p) * (c * a) + nx.log(1.0 - p) * (c * (1.0 - a))
    return nx.sum(ll) * (-1.0 / max(1.0, total))


def total_loss(dice, group, weights: LossWeights):
    return dice * weights.dice + group * weights.group


# ---------------------------------------------------------------- inference grouping

class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller root wins so group ids are stable
            lo, hi = min(ra, rb), max(ra, rb)
            self.parent[hi] = lo

    def components(self, items) -> list[list[int]]:
        groups: dict[int, list[int]] = {}
        for i in items:
            groups.setdefault(self.find(i), []).append(i)
        return sorted(groups.values(), key=lambda g: g[0])


def group_instances(affinity, valid, cfg: GroupingConfig | float = 0.8) -> list[list[int]]:
    """Connected components of the graph {(i, j): A[i, j] >= t} over valid instances."""
    t = cfg.threshold if isinstance(cfg, GroupingConfig) else float(cfg)
    a = affinity.data if isinstance(affinity, Tensor) else np.asarray(affinity)
    idx = [int(i) for i in np.flatnonzero(np.asarray(valid, dtype=bool))]
    uf = UnionFind(a.shape[0])
    for ii, i in enumerate(idx):
        for j in idx[ii + 1:]:
            if a[i, j] >= t or a[j, i] >= t:
                uf.union(i, j)
    return uf.components(idx)
