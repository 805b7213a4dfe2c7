"""Two-stage cascade: a word-level TGA predicts line masks, a line-level TGA groups them.

Parameter names carry a ``word.`` or ``line.`` prefix.  Both stages are
complete TGAs; the line stage's pixel embedding layers read the word stage's
per-scale conv outputs instead of the backbone maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import pixel_embedding as pe
from .geometry import RegionSet, downsample_mask, unify_regions
from .head import AFFINITY_EPS, UnionFind, affinity_loss, group_instances, init_attention_params, mask_loss
from .matching import GroupTargets, build_targets
from .metrics import iou_matrix
from .model import EMBED_STRIDE, PreparedScene, TGAConfig, embed, head_forward, init_tga_params
from .numerics import ParamStore, Tensor


def _word_default() -> TGAConfig:
    return TGAConfig(instance_level="word", group_level="line", alpha_group=0.0)


def _line_default() -> TGAConfig:
    return TGAConfig(instance_level="line", group_level="paragraph")


@dataclass
class CascadeConfig:
    word: TGAConfig = field(default_factory=_word_default)
    line: TGAConfig = field(default_factory=_line_default)
    line_threshold: float = 0.5     # binarization of predicted line masks
    merge_iou: float = 0.5          # predicted lines at least this similar collapse
    stop_gradient: bool = True

    def __post_init__(self):
        if self.word.dim != self.line.dim:
            raise ValueError(f"stages must share D, got {self.word.dim} and {self.line.dim}")
        if not self.word.pixel_embedding:
            raise ValueError("the line stage reuses the word stage's multi-scale branches")
        if (self.word.instance_level, self.word.group_level) != ("word", "line"):
            raise ValueError("word stage must group words into lines")
        if (self.line.instance_level, self.line.group_level) != ("line", "paragraph"):
            raise ValueError("line stage must group lines into paragraphs")
        if not 0.0 < self.line_threshold < 1.0:
            raise ValueError(f"line_threshold must lie in (0, 1), got {self.line_threshold}")

    # the evaluation levels of the whole cascade
    instance_level = "word"
    group_level = "paragraph"

    @property
    def threshold(self) -> float:
        return self.line.threshold

    def to_dict(self) -> dict:
        return {"word": self.word.to_dict(), "line": self.line.to_dict(),
                "line_threshold": self.line_threshold, "merge_iou": self.merge_iou,
                "stop_gradient": self.stop_gradient}

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        return cls(TGAConfig.from_dict(d["word"]), TGAConfig.from_dict(d["line"]),
                   d.get("line_threshold", 0.5), d.get("merge_iou", 0.5),
                   d.get("stop_gradient", True))


@dataclass
class CascadeOutput:
    word_masks: Tensor              # [N, H/8, W/8] predicted line probability per word
    line_masks: np.ndarray          # [N, H/8, W/8] merged line instances (padded)
    line_valid: np.ndarray          # [N] bool
    members: list[list[int]]        # word slots behind each line instance
    line_logits: Tensor | None
    affinity: Tensor | None
    line_targets: GroupTargets | None = None
    word_affinity: Tensor | None = None


def init_cascade_params(cfg: CascadeConfig, rng) -> ParamStore:
    params = init_tga_params(cfg.word, rng, "word.")
    line = pe.init_params(rng, cfg.word.dim, cfg.line.dim, cfg.line.enhanced)
    line.update(init_attention_params(rng, cfg.line.attention))
    for name, t in line.items():
        params["line." + name] = t.data
    return params


def prepare_cascade_scene(scene, cfg: CascadeConfig, with_targets: bool = True) -> PreparedScene:
    """Word instances from the stored word detections, with word->line targets."""
    ann = scene.annotation
    inst = unify_regions(RegionSet("polygons", scene.detections["word"]), cfg.word.capacity,
                         ann.height, ann.width)
    low = downsample_mask(inst.masks, EMBED_STRIDE)
    prep = PreparedScene(ann, scene.feats, inst, low)
    if with_targets:
        prep.targets = build_targets(inst.masks, inst.valid, ann, "word", "line", EMBED_STRIDE)
    return prep


def merge_lines(line_probs: np.ndarray, word_low: np.ndarray, valid: np.ndarray,
                threshold: float = 0.5, merge_iou: float = 0.5
                ) -> tuple[np.ndarray, np.ndarray, list[list[int]]]:
    """Turn per-word line predictions into deduplicated line instances.

    A word whose binarized line mask comes out empty falls back to its own
    mask, so every word lands in some line.  Words whose masks reach
    ``merge_iou`` are chained together; a merged line is the union of its
    members.
    """
    slots = [int(i) for i in np.flatnonzero(valid)]
    n = len(valid)
    out = np.zeros((n, *line_probs.shape[1:]))
    out_valid = np.zeros(n, dtype=bool)
    if not slots:
        return out, out_valid, []
    binary = (line_probs[slots] >= threshold).astype(np.float64)
    own = word_low[slots] > 0.5
    empty = ~binary.reshape(len(slots), -1).any(axis=1)
    binary[empty] = own[empty]
    ious = iou_matrix(binary, binary)
    uf = UnionFind(len(slots))
    for a in range(len(slots)):
        for b in range(a + 1, len(slots)):
            if ious[a, b] >= merge_iou:
                uf.union(a, b)
    members = []
    for k, comp in enumerate(uf.components(range(len(slots)))):
        out[k] = binary[comp].max(axis=0)
        out_valid[k] = True
        members.append([slots[c] for c in comp])
    return out, out_valid, members


def cascade_forward(prep: PreparedScene, params: ParamStore, cfg: CascadeConfig,
                    with_targets: bool = True, line_probs: np.ndarray | None = None
                    ) -> CascadeOutput:
    """Run both stages.  ``line_probs`` ([N, H/8, W/8]) overrides the word
    stage's line predictions before merging, e.g. to inject oracle lines."""
    valid = prep.instances.valid
    word_params = params.scoped("word.")
    line_params = params.scoped("line.")
    emb = embed(prep.feats, word_params, cfg.word)
    _, _, _, word_masks, word_aff = head_forward(emb.P, prep.low_masks, valid, word_params,
                                                 cfg.word)

    probs = word_masks.data if line_probs is None else np.asarray(line_probs, dtype=np.float64)
    lines, line_valid, members = merge_lines(probs, prep.low_masks, valid,
                                             cfg.line_threshold, cfg.merge_iou)
    maps = emb.scale_maps
    if cfg.stop_gradient:
        maps = {s: m.detach() for s, m in maps.items()}
    P_line = pe.fuse(maps, line_params, cfg.line.enhanced).P
    _, _, logits, _, aff = head_forward(P_line, lines, line_valid, line_params, cfg.line)
    targets = None
    if with_targets:
        targets = build_targets(lines, line_valid, prep.annotation, "line", "paragraph",
                                factor=EMBED_STRIDE, gt_factor=EMBED_STRIDE)
    return CascadeOutput(word_masks, lines, line_valid, members, logits, aff, targets, word_aff)


def cascade_loss(prep: PreparedScene, params: ParamStore, cfg: CascadeConfig) -> dict[str, Tensor]:
    """Sum of the word-stage and line-stage totals."""
    if not prep.instances.valid.any():
        zero = Tensor(0.0)
        return {"mask": zero, "group": zero, "word": zero, "line": zero, "total": zero}
    out = cascade_forward(prep, params, cfg)
    word_mask = mask_loss(out.word_masks, prep.targets, cfg.word.mask_loss)
    word_group = (affinity_loss(out.word_affinity, prep.targets) if cfg.word.alpha_group > 0
                  else Tensor(0.0))
    word_total = word_mask * cfg.word.alpha_dice + word_group * cfg.word.alpha_group
    line_mask = (mask_loss(nx.sigmoid(out.line_logits), out.line_targets, cfg.line.mask_loss)
                 if cfg.line.alpha_dice > 0 else Tensor(0.0))
    group = affinity_loss(out.affinity, out.line_targets) if cfg.line.alpha_group > 0 else Tensor(0.0)
    line_total = line_mask * cfg.line.alpha_dice + group * cfg.line.alpha_group
    return {"mask": word_mask + line_mask, "group": word_group + group, "word": word_total,
            "line": line_total, "total": word_total + line_total}


def predict_cascade_groups(prep: PreparedScene, params: ParamStore, cfg: CascadeConfig,
                           threshold: float | None = None) -> tuple[list[list[int]], np.ndarray]:
    """Paragraphs as partitions of word slots, plus the line-instance affinity."""
    valid = prep.instances.valid
    if not valid.any():
        return [], np.zeros((len(valid),) * 2)
    out = cascade_forward(prep, params, cfg, with_targets=False)
    t = cfg.line.threshold if threshold is None else threshold
    aff = np.clip(out.affinity.data, AFFINITY_EPS, 1.0 - AFFINITY_EPS)
    line_groups = group_instances(aff, out.line_valid, t)
    words = [sorted(w for ln in g for w in out.members[ln]) for g in line_groups]
    return sorted(words, key=lambda g: g[0]), aff
