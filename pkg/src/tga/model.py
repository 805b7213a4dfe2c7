"""The Text Grouping Adapter assembled from its parts, plus scene preparation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import pixel_embedding as pe
from .assembly import assemble_features
from .geometry import InstanceMaskSet, RegionSet, downsample_mask, unify_regions
from .head import (AFFINITY_EPS, AttentionConfig, GroupingConfig, LossWeights, affinity_loss,
                   attention_param_names, group_instances, group_mask_logits,
                   init_attention_params, mask_loss, predict_affinity, self_attention_update,
                   total_loss)
from . import numerics as nx
from .matching import GroupTargets, build_targets
from .numerics import ParamStore, Tensor

EMBED_STRIDE = 8


@dataclass
class TGAConfig:
    dim: int = 256
    channels: int = 32
    layers: int = 3
    heads: int = 4
    hidden: int = 512
    threshold: float = 0.8
    alpha_dice: float = 1.0
    alpha_group: float = 1.0
    enhanced: bool = False
    pixel_embedding: bool = True
    mask_loss: str = "dice"
    capacity: int = 32
    instance_level: str = "line"
    group_level: str = "paragraph"

    def __post_init__(self):
        if self.mask_loss not in ("dice", "bce", "both"):
            raise ValueError(f"mask_loss must be dice, bce or both, got {self.mask_loss!r}")
        AttentionConfig(self.dim, self.layers, self.heads, self.hidden)
        GroupingConfig(self.threshold)
        LossWeights(self.alpha_dice, self.alpha_group)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.dim, self.layers, self.heads, self.hidden)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha_dice, self.alpha_group)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TGAConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class PreparedScene:
    """Everything about a scene that does not depend on trainable parameters."""
    annotation: object
    feats: pe.MultiScaleFeatures
    instances: InstanceMaskSet            # full resolution
    low_masks: np.ndarray                 # [N, H/8, W/8]
    targets: GroupTargets | None = None


@dataclass
class TGAOutput:
    P: Tensor
    branches: list
    F: Tensor
    F_hat: Tensor
    mask_logits: Tensor
    masks: Tensor
    affinity: Tensor
    valid: np.ndarray


def init_tga_params(cfg: TGAConfig, rng: np.random.Generator, prefix: str = "") -> ParamStore:
    params = pe.init_params(rng, cfg.channels, cfg.dim, cfg.enhanced,
                            single_scale=not cfg.pixel_embedding)
    params.update(init_attention_params(rng, cfg.attention))
    if prefix:
        return ParamStore({prefix + n: t.data for n, t in params.items()})
    return params


def tga_param_names(cfg: TGAConfig) -> list[str]:
    return (pe.param_names(cfg.enhanced, single_scale=not cfg.pixel_embedding)
            + attention_param_names(cfg.attention))


def prepare_scene(scene, cfg: TGAConfig, with_targets: bool = True) -> PreparedScene:
    """Unify the stored detections of ``cfg.instance_level`` and build training targets."""
    ann = scene.annotation
    regions = RegionSet("polygons", scene.detections[cfg.instance_level])
    inst = unify_regions(regions, cfg.capacity, ann.height, ann.width)
    low = downsample_mask(inst.masks, EMBED_STRIDE)
    prep = PreparedScene(ann, scene.feats, inst, low)
    if with_targets:
        prep.targets = build_targets(inst.masks, inst.valid, ann, cfg.instance_level,
                                     cfg.group_level, EMBED_STRIDE)
    return prep


def embed(feats: pe.MultiScaleFeatures, params: ParamStore, cfg: TGAConfig) -> pe.PixelEmbedding:
    if cfg.pixel_embedding:
        return pe.build_pixel_embedding(feats, params, cfg.enhanced)
    return pe.build_single_scale_embedding(feats, params)


def head_forward(P: Tensor, low_masks: np.ndarray, valid: np.ndarray, params: ParamStore,
                 cfg: TGAConfig, prefix: str = "sa") -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    feats = assemble_features(low_masks, valid, P)
    f_hat = self_attention_update(feats.F, params, valid, cfg.attention, prefix)
    logits = group_mask_logits(f_hat, P)
    return feats.F, f_hat, logits, nx.sigmoid(logits), predict_affinity(f_hat)


def forward(prep: PreparedScene, params: ParamStore, cfg: TGAConfig) -> TGAOutput:
    emb = embed(prep.feats, params, cfg)
    F, f_hat, logits, masks, aff = head_forward(emb.P, prep.low_masks, prep.instances.valid,
                                                params, cfg)
    return TGAOutput(emb.P, emb.branches, F, f_hat, logits, masks, aff, prep.instances.valid)


def losses(out: TGAOutput, targets: GroupTargets, cfg: TGAConfig) -> dict[str, Tensor]:
    lm = mask_loss(out.masks, targets, cfg.mask_loss) if cfg.alpha_dice > 0 else Tensor(0.0)
    lg = affinity_loss(out.affinity, targets) if cfg.alpha_group > 0 else Tensor(0.0)
    return {"mask": lm, "group": lg, "total": total_loss(lm, lg, cfg.weights)}


def scene_loss(prep: PreparedScene, params: ParamStore, cfg: TGAConfig) -> dict[str, Tensor]:
    if not prep.instances.valid.any():
        zero = Tensor(0.0)
        return {"mask": zero, "group": zero, "total": zero}
    return losses(forward(prep, params, cfg), prep.targets, cfg)


def predict_groups(prep: PreparedScene, params: ParamStore, cfg: TGAConfig,
                   threshold: float | None = None) -> tuple[list[list[int]], np.ndarray]:
    if not prep.instances.valid.any():
        return [], np.zeros((prep.instances.capacity,) * 2)
    out = forward(prep, params, cfg)
    t = cfg.threshold if threshold is None else threshold
    aff = np.clip(out.affinity.data, AFFINITY_EPS, 1.0 - AFFINITY_EPS)
    return group_instances(aff, prep.instances.valid, t), aff
