"""Conversion of heterogeneous detector regions into binary instance masks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

REGION_KINDS = ("semantic_map", "instance_masks", "polygons", "bezier_regions")


@dataclass
class RegionSet:
    """Raw detector output.

    ``payload`` depends on ``kind``:
      semantic_map    -- [H, W] array of scores in [0, 1]
      instance_masks  -- [K, H, W] binary array (or list of [H, W] masks)
      polygons        -- list of [(x, y), ...] with at least 3 vertices
      bezier_regions  -- list of [2, 4, 2] control points (top side, bottom side)
    """

    kind: str
    payload: object
    threshold: float = 0.5
    bezier_samples: int = 10

    def __post_init__(self):
        if self.kind not in REGION_KINDS:
            raise ValueError(f"unknown region kind {self.kind!r}; expected one of {REGION_KINDS}")
        if self.kind == "semantic_map":
            m = np.asarray(self.payload, dtype=np.float64)
            if m.ndim != 2 or m.min(initial=0.0) < 0 or m.max(initial=0.0) > 1:
                raise ValueError("semantic_map must be a 2-D array with values in [0, 1]")
        elif self.kind == "polygons":
            for i, p in enumerate(self.payload):
                if len(p) < 3:
                    raise ValueError(f"polygon {i} has {len(p)} vertices; need at least 3")
        elif self.kind == "bezier_regions":
            for i, b in enumerate(self.payload):
                if np.asarray(b).shape != (2, 4, 2):
                    raise ValueError(f"bezier region {i} must have shape (2, 4, 2)")


@dataclass
class InstanceMaskSet:
    masks: np.ndarray                 # [N, H, W] in {0, 1}
    valid: np.ndarray                 # [N] bool
    report: dict = field(default_factory=dict)

    @property
    def capacity(self) -> int:
        return self.masks.shape[0]

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())


def binarize_semantic(score_map: np.ndarray, threshold: float) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(score_map) >= threshold).astype(np.float64)


def extract_instances(binary: np.ndarray) -> list[np.ndarray]:
    """8-connected components, ordered by their first pixel in row-major order."""
    b = np.asarray(binary) > 0.5
    h, w = b.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    comps: list[np.ndarray] = []
    for r0, c0 in zip(*np.nonzero(b)):
        if labels[r0, c0] >= 0:
            continue
        lab = len(comps)
        labels[r0, c0] = lab
        stack = [(r0, c0)]
        while stack:
            r, c = stack.pop()
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and b[rr, cc] and labels[rr, cc] < 0:
                        labels[rr, cc] = lab
                        stack.append((rr, cc))
        comps.append(None)
    return [(labels == k).astype(np.float64) for k in range(len(comps))]


def cubic_bezier(ctrl: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Evaluate a cubic in Bernstein form at parameters ``ts``; ctrl is [4, 2]."""
    ctrl = np.asarray(ctrl, dtype=np.float64)
    t = np.asarray(ts, dtype=np.float64)[:, None]
    u = 1.0 - t
    return (u ** 3) * ctrl[0] + 3 * u * u * t * ctrl[1] + 3 * u * t * t * ctrl[2] + (t ** 3) * ctrl[3]


def bezier_to_polygon(region, samples: int = 10) -> np.ndarray:
    """Sample both sides and close them into a 2*samples-gon (top forward, bottom reversed)."""
    if samples < 2:
        raise ValueError(f"need at least 2 samples per side, got {samples}")
    region = np.asarray(region, dtype=np.float64)
    ts = np.linspace(0.0, 1.0, samples)
    top = cubic_bezier(region[0], ts)
    bottom = cubic_bezier(region[1], ts)
    return np.concatenate([top, bottom[::-1]], axis=0)


def rasterize_polygon(poly, height: int, width: int) -> np.ndarray:
    """Even-odd fill sampled at pixel centers (c + 0.5, r + 0.5)."""
    if height < 1 or width < 1:
        raise ValueError("image dims must be positive")
    pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((height, width))
    if len(pts) < 3:
        warnings.warn(f"polygon with {len(pts)} vertices rasterizes to an empty mask")
        return out
    xs = np.arange(width) + 0.5
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for r in range(height):
        yc = r + 0.5
        # half-open crossing rule: edge counts when yc lies in [min_y, max_y)
        crosses = (y0 <= yc) != (y1 <= yc)
        if not crosses.any():
            continue
        xa, ya, xb, yb = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xi = xa + (yc - ya) * (xb - xa) / (yb - ya)
        inside = (xs[None, :] < xi[:, None]).sum(axis=0) % 2 == 1
        out[r, inside] = 1.0
    return out


def unify_regions(regions: RegionSet, capacity: int, height: int, width: int) -> InstanceMaskSet:
    if capacity < 1:
        raise ValueError("capacity must be at least 1")
    if regions.kind == "semantic_map":
        found = extract_instances(binarize_semantic(regions.payload, regions.threshold))
    elif regions.kind == "instance_masks":
        found = [(np.asarray(m) > 0.5).astype(np.float64) for m in regions.payload]
    elif regions.kind == "polygons":
        found = [rasterize_polygon(p, height, width) for p in regions.payload]
    else:
        found = [rasterize_polygon(bezier_to_polygon(b, regions.bezier_samples), height, width)
                 for b in regions.payload]
    for m in found:
        if m.shape != (height, width):
            raise ValueError(f"instance mask shape {m.shape} does not match ({height}, {width})")

    # a detection that covers no pixel centre cannot seed an instance feature
    report = {"detected": len(found), "empty": sum(1 for m in found if not m.any())}
    order = [i for i, m in enumerate(found) if m.any()]
    report["kept"] = min(len(order), capacity)
    report["truncated"] = 0
    if len(order) > capacity:
        # stable sort: ties keep detector order
        by_area = sorted(order, key=lambda i: -found[i].sum())
        keep = set(by_area[:capacity])
        report["truncated"] = len(order) - capacity
        report["dropped"] = sorted(set(order) - keep)
        order = [i for i in order if i in keep]
    masks = np.zeros((capacity, height, width))
    valid = np.zeros(capacity, dtype=bool)
    for slot, i in enumerate(order):
        masks[slot] = found[i]
        valid[slot] = True
    report["source_index"] = order
    return InstanceMaskSet(masks, valid, report)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool a binary mask (or a stack of them) by ``factor``."""
    m = np.asarray(mask)
    h, w = m.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide mask dims ({h}, {w})")
    lead = m.shape[:-2]
    blocks = m.reshape(*lead, h // factor, factor, w // factor, factor)
    return (blocks.max(axis=(-3, -1)) > 0.5).astype(np.float64)


def upsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour inverse of ``downsample_mask`` for visualisation and evaluation."""
    m = np.asarray(mask)
    return np.repeat(np.repeat(m, factor, axis=-2), factor, axis=-1)


def contour_polygon(mask: np.ndarray) -> np.ndarray:
    """Boundary polygon of a single 8-connected blob.

    Traces the outer pixel boundary along pixel edges (crack following), so
    rasterizing the result with the pixel-center rule reproduces the blob
    exactly when it has no holes.
    """
    b = np.asarray(mask) > 0.5
    if not b.any():
        return np.zeros((0, 2))
    h, w = b.shape
    pad = np.zeros((h + 2, w + 2), dtype=bool)
    pad[1:-1, 1:-1] = b

    def filled(r, c):  # r, c in image coords
        return pad[r + 1, c + 1]

    # start at the top-left edge of the first pixel, heading right (interior on the right)
    r0, c0 = map(int, np.argwhere(b)[0])
    start = (c0, r0)
    direction = (1, 0)
    pt = start
    verts = [pt]
    # directions in (dx, dy), image y grows downward; boundary traced clockwise
    while True:
        x, y = pt
        dx, dy = direction
        # left turn first keeps diagonally touching pixels in one boundary
        cand = [(dy, -dx), (dx, dy), (-dy, dx)]
        for ndx, ndy in cand:
            if _edge_ok(filled, x, y, ndx, ndy):
                direction = (ndx, ndy)
                break
        else:
            direction = (-dx, -dy)
        pt = (x + direction[0], y + direction[1])
        if pt == start:
            break
        verts.append(pt)
    return _simplify(np.asarray(verts, dtype=np.float64))


def _edge_ok(filled, x, y, dx, dy) -> bool:
    # moving from lattice point (x, y) by (dx, dy): the pixel on the right of the
    # edge must be filled and the pixel on the left must be empty
    if dx == 1:
        right, left = (y, x), (y - 1, x)
    elif dx == -1:
        right, left = (y - 1, x - 1), (y, x - 1)
    elif dy == 1:
        right, left = (y, x - 1), (y, x)
    else:
        right, left = (y - 1, x), (y - 1, x - 1)
    return filled(*right) and not filled(*left)


def _simplify(verts: np.ndarray) -> np.ndarray:
    """Drop collinear lattice points."""
    n = len(verts)
    if n < 3:
        return verts
    keep = []
    for i in range(n):
        a, b, c = verts[i - 1], verts[i], verts[(i + 1) % n]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross != 0:
            keep.append(b)
    return np.asarray(keep)
