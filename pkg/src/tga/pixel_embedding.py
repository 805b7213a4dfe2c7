"""Pixel Embedding Layers: fuse X2..X5 into a single map at 1/8 resolution."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ParamStore, Tensor

SCALES = {"x2": 4, "x3": 8, "x4": 16, "x5": 32}
EXTRA_REFINE = 2


@dataclass
class MultiScaleFeatures:
    x2: np.ndarray
    x3: np.ndarray
    x4: np.ndarray
    x5: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        if self.height % 32 or self.width % 32:
            raise ValueError(f"input dims ({self.height}, {self.width}) must be divisible by 32")
        chans = {a.shape[0] for a in self.maps().values()}
        if len(chans) != 1:
            raise ValueError(f"all scales must share a channel count, got {sorted(chans)}")
        for name, stride in SCALES.items():
            got = getattr(self, name).shape[1:]
            want = (self.height // stride, self.width // stride)
            if got != want:
                raise ValueError(f"{name} has spatial dims {got}, expected {want}")

    @property
    def channels(self) -> int:
        return self.x2.shape[0]

    def maps(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in SCALES}


@dataclass
class PixelEmbedding:
    P: Tensor                   # [D, H/8, W/8]
    branches: list[Tensor]      # per-scale maps before summation (all at 1/8)
    scale_maps: dict = field(default_factory=dict)  # per-scale conv outputs at native stride

    @property
    def dim(self) -> int:
        return self.P.shape[0]


def refine_names(enhanced: bool, prefix: str = "pe") -> list[str]:
    names = [f"{prefix}.refine_extra{i}" for i in range(EXTRA_REFINE)] if enhanced else []
    return names + [f"{prefix}.refine"]


def param_names(enhanced: bool = False, single_scale: bool = False, prefix: str = "pe") -> list[str]:
    scales = ["x3"] if single_scale else list(SCALES)
    stages = [f"{prefix}.{s}" for s in scales] + ([] if single_scale else refine_names(enhanced, prefix))
    return [f"{s}.{p}" for s in stages for p in ("w", "b")]


def _conv_init(rng: np.random.Generator, cout: int, cin: int, gain: float = 2.0) -> np.ndarray:
    return rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(gain / (cin * 9))


def init_params(rng: np.random.Generator, channels: int, dim: int, enhanced: bool = False,
                single_scale: bool = False, out_gain: float = 0.002, prefix: str = "pe") -> ParamStore:
    """He-style init; the last conv is scaled by ``out_gain`` to keep early logits small."""
    params = ParamStore()
    scales = ["x3"] if single_scale else list(SCALES)
    for s in scales:
        gain = out_gain if single_scale else 2.0
        params[f"{prefix}.{s}.w"] = _conv_init(rng, dim, channels, gain)
        params[f"{prefix}.{s}.b"] = np.zeros(dim)
    if not single_scale:
        add_refine_params(params, rng, dim, enhanced, prefix, out_gain)
    return params


def add_refine_params(params: ParamStore, rng: np.random.Generator, dim: int, enhanced: bool,
                      prefix: str, out_gain: float = 0.002):
    names = refine_names(enhanced, prefix)
    for i, stage in enumerate(names):
        last = i == len(names) - 1
        params[f"{stage}.w"] = _conv_init(rng, dim, dim, out_gain if last else 2.0)
        params[f"{stage}.b"] = np.zeros(dim)


def _resample(x: Tensor, scale: str) -> Tensor:
    if scale == "x2":
        return nx.avg_pool2(x)
    if scale == "x3":
        return x
    return nx.upsample_bilinear(x, 2 if scale == "x4" else 4)


def scale_convs(maps: dict, params: ParamStore, prefix: str = "pe", relu: bool = True) -> dict:
    """Per-scale conv (+ ReLU) at each scale's own stride."""
    out = {}
    for s in SCALES:
        x = maps[s] if isinstance(maps[s], Tensor) else Tensor(maps[s])
        y = nx.conv2d(x, params[f"{prefix}.{s}.w"], params[f"{prefix}.{s}.b"])
        out[s] = nx.relu(y) if relu else y
    return out


def scale_branches(feats: MultiScaleFeatures, params: ParamStore, relu: bool = True) -> list[Tensor]:
    """Per-scale conv + resample, before summation."""
    convs = scale_convs(feats.maps(), params, "pe", relu)
    return [_resample(y, s) for s, y in convs.items()]


def refine(summed: Tensor, params: ParamStore, enhanced: bool, prefix: str = "pe",
           relu: bool = True) -> Tensor:
    names = refine_names(enhanced, prefix)
    y = summed
    for i, stage in enumerate(names):
        y = nx.conv2d(y, params[f"{stage}.w"], params[f"{stage}.b"])
        if relu and i < len(names) - 1:
            y = nx.relu(y)
    return y


def fuse(maps: dict, params: ParamStore, enhanced: bool = False, prefix: str = "pe",
         relu: bool = True) -> PixelEmbedding:
    """conv per scale -> resample to 1/8 -> sum -> refine conv(s)."""
    params.require(param_names(enhanced, prefix=prefix))
    convs = scale_convs(maps, params, prefix, relu)
    branches = [_resample(y, s) for s, y in convs.items()]
    summed = branches[0]
    for b in branches[1:]:
        summed = summed + b
    return PixelEmbedding(refine(summed, params, enhanced, prefix, relu), branches, convs)


def build_pixel_embedding(feats: MultiScaleFeatures, params: ParamStore, enhanced: bool = False,
                          relu: bool = True) -> PixelEmbedding:
    """Fuse all four backbone scales into P.

    ``relu=False`` disables every activation; used to test linearity.
    """
    return fuse(feats.maps(), params, enhanced, "pe", relu)


def build_single_scale_embedding(feats: MultiScaleFeatures, params: ParamStore) -> PixelEmbedding:
    """Ablation: P is a single conv projection of X3, no fusion and no refine stage."""
    params.require(param_names(single_scale=True))
    p = nx.conv2d(Tensor(feats.x3), params["pe.x3.w"], params["pe.x3.b"])
    return PixelEmbedding(p, [p])
