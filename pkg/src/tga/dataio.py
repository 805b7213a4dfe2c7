"""Annotation ingestion, TNSR tensor files and the synthetic scene generator.

Random numbers
--------------
Everything random in this package draws from :class:`PortableRng`: the PCG64
bit generator (O'Neill's PCG-XSL-RR 128/64 as shipped in numpy) read through
``random_raw()``.  Uniform doubles take the top 53 bits of each 64-bit word;
normals use the Box-Muller transform on two uniforms.  Only the raw bit stream
is relied upon, so fixtures are identical on every platform and numpy release.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .geometry import downsample_mask, rasterize_polygon
from .pixel_embedding import SCALES, MultiScaleFeatures

LEVELS = ("word", "line", "paragraph")
TNSR_MAGIC = b"TNSR"


class FormatError(ValueError):
    """A file does not follow the TNSR or annotation layout."""


class AnnotationError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer


# ---------------------------------------------------------------- PRNG

class PortableRng:
    def __init__(self, seed: int):
        self._bits = np.random.PCG64(int(seed))

    def uniform(self, size: int | tuple[int, ...] = ()) -> np.ndarray | float:
        n = int(np.prod(size)) if size != () else 1
        raw = self._bits.random_raw(n)
        u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if size == () else u.reshape(size)

    def normal(self, size: int | tuple[int, ...]) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)          # (0, 1], safe for log
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    standard_normal = normal

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):  # Fisher-Yates
            j = self.integer(0, i)
            items[i], items[j] = items[j], items[i]
        return items


# ---------------------------------------------------------------- tensor files

def write_tensor(path, array: np.ndarray):
    a = np.asarray(array)
    if not 1 <= a.ndim <= 4:
        raise FormatError(f"TNSR rank must be in [1, 4], got {a.ndim}")
    header = TNSR_MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    Path(path).write_bytes(header + a.astype("<f4").tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TNSR_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {raw[:4]!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if not 1 <= rank <= 4:
        raise FormatError(f"{path}: rank {rank} outside [1, 4]")
    if len(raw) < 8 + 4 * rank:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims))
    if len(raw) - offset != 4 * count:
        raise FormatError(f"{path}: payload has {len(raw) - offset} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).astype(np.float64).reshape(dims)


# ---------------------------------------------------------------- annotations

@dataclass
class Line:
    words: list[np.ndarray]
    vertices: np.ndarray | None = None


@dataclass
class Paragraph:
    lines: list[Line]
    vertices: np.ndarray | None = None


@dataclass
class SceneAnnotation:
    image_id: str
    height: int
    width: int
    paragraphs: list[Paragraph]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def polygons(self, level: str) -> list[np.ndarray]:
        if level == "word":
            return [w for p in self.paragraphs for ln in p.lines for w in ln.words]
        if level == "line":
            return [ln.vertices for p in self.paragraphs for ln in p.lines]
        if level == "paragraph":
            return [p.vertices for p in self.paragraphs]
        raise ValueError(f"unknown level {level!r}")

    def masks(self, level: str) -> np.ndarray:
        """[K, H, W] ground-truth masks; lines and paragraphs fall back to unions."""
        if level not in self._cache:
            if level == "word":
                ms = [rasterize_polygon(w, self.height, self.width) for w in self.polygons("word")]
            else:
                ms = self._union_masks(level)
            self._cache[level] = np.asarray(ms).reshape(-1, self.height, self.width)
        return self._cache[level]

    def _union_masks(self, level: str) -> list[np.ndarray]:
        child = "word" if level == "line" else "line"
        sub = self.masks(child)
        out = []
        for k, members in enumerate(self.groups(child, level)):
            poly = self.polygons(level)[k]
            if poly is not None:
                out.append(rasterize_polygon(poly, self.height, self.width))
            else:
                out.append(np.clip(sub[members].sum(axis=0), 0, 1))
        return out

    def groups(self, instance_level: str, group_level: str) -> list[list[int]]:
        """Indices of ``instance_level`` entities belonging to each ``group_level`` entity."""
        if LEVELS.index(group_level) <= LEVELS.index(instance_level):
            raise ValueError(f"cannot group {instance_level} into {group_level}")
        groups: list[list[int]] = []
        idx = 0
        for p in self.paragraphs:
            if group_level == "paragraph":
                groups.append([])
            for ln in p.lines:
                if group_level == "line":
                    groups.append([])
                if instance_level == "word":
                    n = len(ln.words)
                    groups[-1].extend(range(idx, idx + n))
                    idx += n
                else:
                    groups[-1].append(idx)
                    idx += 1
        return groups

    def group_of(self, instance_level: str, group_level: str) -> np.ndarray:
        gs = self.groups(instance_level, group_level)
        out = np.empty(sum(len(g) for g in gs), dtype=np.int64)
        for k, g in enumerate(gs):
            out[g] = k
        return out

    def group_masks(self, instance_level: str, group_level: str) -> np.ndarray:
        """Group mask = union of its member instance masks."""
        inst = self.masks(instance_level)
        return np.asarray([np.clip(inst[g].sum(axis=0), 0, 1)
                           for g in self.groups(instance_level, group_level)])

    def counts(self) -> dict[str, int]:
        return {lv: len(self.polygons(lv)) for lv in LEVELS}

    def to_json(self) -> dict:
        def verts(v):
            return None if v is None else np.asarray(v).tolist()

        paras = []
        for p in self.paragraphs:
            lines = [{"vertices": verts(ln.vertices),
                      "words": [{"vertices": verts(w)} for w in ln.words]} for ln in p.lines]
            paras.append({"vertices": verts(p.vertices), "lines": lines})
        return {"image_id": self.image_id, "image_width": self.width,
                "image_height": self.height, "paragraphs": paras}


def _vertices(obj: Any, pointer: str, height: int, width: int, required: bool) -> np.ndarray | None:
    if obj is None or "vertices" not in obj or obj["vertices"] is None:
        if required:
            raise AnnotationError(pointer, "missing 'vertices'")
        return None
    v = obj["vertices"]
    if (not isinstance(v, list) or len(v) < 3
            or not all(isinstance(p, list) and len(p) == 2 for p in v)):
        raise AnnotationError(f"{pointer}/vertices", "expected a list of at least 3 [x, y] pairs")
    try:
        arr = np.asarray(v, dtype=np.float64)
    except (TypeError, ValueError):
        raise AnnotationError(f"{pointer}/vertices", "non-numeric coordinate") from None
    arr[:, 0] = np.clip(arr[:, 0], 0, width)
    arr[:, 1] = np.clip(arr[:, 1], 0, height)
    return arr


def parse_annotation(obj: Any, pointer: str) -> SceneAnnotation:
    if not isinstance(obj, dict):
        raise AnnotationError(pointer, "annotation must be an object")
    for key in ("image_width", "image_height"):
        if not isinstance(obj.get(key), int) or obj[key] < 1:
            raise AnnotationError(f"{pointer}/{key}", "must be a positive integer")
    h, w = obj["image_height"], obj["image_width"]
    if not isinstance(obj.get("paragraphs"), list):
        raise AnnotationError(f"{pointer}/paragraphs", "must be a list")
    paragraphs = []
    for pi, p in enumerate(obj["paragraphs"]):
        pp = f"{pointer}/paragraphs/{pi}"
        if not isinstance(p, dict):
            raise AnnotationError(pp, "paragraph must be an object")
        if "words" in p:
            raise AnnotationError(f"{pp}/words/0", "word is not inside any line")
        lines_raw = p.get("lines")
        if not isinstance(lines_raw, list) or not lines_raw:
            raise AnnotationError(f"{pp}/lines", "paragraph must contain at least one line")
        lines = []
        for li, ln in enumerate(lines_raw):
            lp = f"{pp}/lines/{li}"
            if not isinstance(ln, dict):
                raise AnnotationError(lp, "line must be an object")
            words_raw = ln.get("words")
            if not isinstance(words_raw, list) or not words_raw:
                raise AnnotationError(f"{lp}/words", "line must contain at least one word")
            words = [_vertices(wd, f"{lp}/words/{wi}", h, w, required=True)
                     for wi, wd in enumerate(words_raw)]
            lines.append(Line(words, _vertices(ln, lp, h, w, required=False)))
        paragraphs.append(Paragraph(lines, _vertices(p, pp, h, w, required=False)))
    return SceneAnnotation(str(obj.get("image_id", "")), h, w, paragraphs)


def load_annotations(path) -> list[SceneAnnotation]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError("", f"malformed JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("annotations"), list):
        raise AnnotationError("/annotations", "top level must hold an 'annotations' list")
    return [parse_annotation(a, f"/annotations/{i}") for i, a in enumerate(doc["annotations"])]


def save_annotations(path, scenes: Iterable[SceneAnnotation]):
    doc = {"annotations": [s.to_json() for s in scenes]}
    Path(path).write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------- synthesis

@dataclass
class SynthConfig:
    seed: int = 0
    paragraphs: int = 3
    lines_per_paragraph: int = 3
    words_per_line: int = 3
    word_height: tuple[int, int] = (6, 9)
    word_width: tuple[int, int] = (8, 16)
    word_gap: tuple[int, int] = (2, 4)
    line_gap: tuple[int, int] = (2, 4)
    paragraph_gap: int = 16
    border: int = 2
    height: int = 160
    width: int = 160
    channels: int = 32
    noise_std: float = 0.05
    position_freqs: int = 4
    detection_jitter: int = 0
    train_scenes: int = 64
    eval_scenes: int = 16

    def __post_init__(self):
        for name in ("paragraphs", "lines_per_paragraph", "words_per_line", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.height % 32 or self.width % 32:
            raise ValueError("image dims must be divisible by 32")
        if self.channels < 1 + 4 * self.position_freqs:
            raise ValueError(f"need at least {1 + 4 * self.position_freqs} feature channels "
                             "(occupancy + positional encoding)")
        for name in ("word_height", "word_width", "word_gap", "line_gap"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ValueError(f"{name} range must satisfy 1 <= lo <= hi")
            setattr(self, name, (int(lo), int(hi)))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthScene:
    annotation: SceneAnnotation
    feats: MultiScaleFeatures
    detections: dict[str, list[np.ndarray]]   # level -> detector polygons


def _rect(x0, y0, x1, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def _layout_paragraph(cfg: SynthConfig, rng: PortableRng):
    """Word boxes of one paragraph relative to its top-left corner."""
    h = rng.integer(*cfg.word_height)
    lines, y, width = [], 0, 0
    for li in range(cfg.lines_per_paragraph):
        x = rng.integer(0, 3)
        words = []
        for wi in range(cfg.words_per_line):
            ww = rng.integer(*cfg.word_width)
            words.append((x, y, x + ww, y + h))
            x += ww + rng.integer(*cfg.word_gap)
        width = max(width, words[-1][2])
        lines.append(words)
        y += h + rng.integer(*cfg.line_gap)
    return lines, width, lines[-1][0][3]


def synth_scene(cfg: SynthConfig, index: int = 0) -> SynthScene:
    """Deterministic hierarchical scene ``index`` of the stream defined by ``cfg.seed``."""
    rng = PortableRng(cfg.seed * 1_000_003 + index)
    blocks = []
    for _ in range(cfg.paragraphs):
        lines, bw, bh = _layout_paragraph(cfg, rng)
        blocks.append((lines, bw, bh))

    g = cfg.paragraph_gap
    placed: list[tuple[int, int, int, int]] = []
    restarts = tries = 0
    while len(placed) < len(blocks):
        _, bw, bh = blocks[len(placed)]
        tries += 1
        if tries > 200:
            # greedy placement can paint itself into a corner; start over
            restarts += 1
            if restarts > 50:
                raise ValueError("synthetic layout does not fit the image after 50 restarts")
            placed, tries = [], 0
            continue
        x_hi = cfg.width - cfg.border - bw
        y_hi = cfg.height - cfg.border - bh
        if x_hi < cfg.border or y_hi < cfg.border:
            continue
        x0 = rng.integer(cfg.border, x_hi)
        y0 = rng.integer(cfg.border, y_hi)
        box = (x0, y0, x0 + bw, y0 + bh)
        if all(box[0] >= b[2] + g or b[0] >= box[2] + g or box[1] >= b[3] + g or b[1] >= box[3] + g
               for b in placed):
            placed.append(box)
            tries = 0

    paragraphs = []
    for (lines, _, _), (px, py, px1, py1) in zip(blocks, placed):
        plines = []
        for words in lines:
            wpolys = [_rect(px + a, py + b, px + c, py + d) for a, b, c, d in words]
            lx0 = px + min(w[0] for w in words)
            lx1 = px + max(w[2] for w in words)
            plines.append(Line(wpolys, _rect(lx0, py + words[0][1], lx1, py + words[0][3])))
        paragraphs.append(Paragraph(plines, _rect(px, py, px1, py1)))
    ann = SceneAnnotation(f"synth_{cfg.seed}_{index:05d}", cfg.height, cfg.width, paragraphs)

    feats = synth_features(ann, cfg, rng)
    detections = {lv: [_jitter(p, cfg.detection_jitter, rng, cfg) for p in ann.polygons(lv)]
                  for lv in ("word", "line")}
    for lv in detections:
        order = rng.permutation(len(detections[lv]))
        detections[lv] = [detections[lv][i] for i in order]
    return SynthScene(ann, feats, detections)


def _jitter(poly: np.ndarray, amount: int, rng: PortableRng, cfg: SynthConfig) -> np.ndarray:
    if amount <= 0:
        return poly.copy()
    x0, y0 = poly.min(axis=0)
    x1, y1 = poly.max(axis=0)
    d = [rng.integer(-amount, amount) for _ in range(4)]
    x0, x1 = np.clip([x0 + d[0], x1 + d[1]], 0, cfg.width)
    y0, y1 = np.clip([y0 + d[2], y1 + d[3]], 0, cfg.height)
    if x1 - x0 < 1:
        x1 = x0 + 1
    if y1 - y0 < 1:
        y1 = y0 + 1
    return _rect(x0, y0, x1, y1)


def occupancy(ann: SceneAnnotation) -> np.ndarray:
    return np.clip(ann.masks("word").sum(axis=0), 0, 1)


def position_channels(h: int, w: int, freqs: int) -> np.ndarray:
    """[4 * freqs, h, w] sin/cos encodings of normalized x and y, wavelengths 2, 1, 1/2 ... of the image."""
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    chans = []
    for k in range(freqs):
        omega = np.pi * 2.0 ** k
        for coord, horizontal in ((xs, True), (ys, False)):
            for fn in (np.sin, np.cos):
                v = fn(omega * coord)
                chans.append(np.broadcast_to(v if horizontal else v[:, None], (h, w)))
    return np.asarray(chans)


def synth_features(ann: SceneAnnotation, cfg: SynthConfig, rng: PortableRng) -> MultiScaleFeatures:
    """Channel 0: text occupancy; next 4*position_freqs: positional encoding; rest: noise."""
    occ = occupancy(ann)
    maps = {}
    for name, stride in SCALES.items():
        h, w = cfg.height // stride, cfg.width // stride
        x = rng.normal((cfg.channels, h, w)) * cfg.noise_std
        x[0] = downsample_mask(occ, stride)
        npos = 4 * cfg.position_freqs
        x[1:1 + npos] = position_channels(h, w, cfg.position_freqs)
        # stored as float32 on disk; keep in-memory scenes bit-identical to loaded ones
        maps[name] = x.astype(np.float32).astype(np.float64)
    return MultiScaleFeatures(**maps, height=cfg.height, width=cfg.width)


# ---------------------------------------------------------------- datasets on disk

def parallel_map(fn, items, workers: int = 1) -> list:
    """Order-preserving map, optionally over worker processes."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _synth_job(job):
    cfg, index = job
    return synth_scene(cfg, index)


def write_dataset(root, cfg: SynthConfig, workers: int = 1) -> Path:
    """Generate train + eval scenes and write them with a manifest.  Returns the manifest path."""
    root = Path(root)
    n = cfg.train_scenes + cfg.eval_scenes
    scenes = parallel_map(_synth_job, [(cfg, i) for i in range(n)], workers)
    root.mkdir(parents=True, exist_ok=True)
    (root / "scenes").mkdir(exist_ok=True)
    entries = []
    for i, sc in enumerate(scenes):
        sid = sc.annotation.image_id
        base = root / "scenes" / sid
        save_annotations(f"{base}.json", [sc.annotation])
        feat_paths = {}
        for name, arr in sc.feats.maps().items():
            write_tensor(f"{base}_{name}.tnsr", arr)
            feat_paths[name] = f"scenes/{sid}_{name}.tnsr"
        dets = {lv: [p.tolist() for p in polys] for lv, polys in sc.detections.items()}
        Path(f"{base}_det.json").write_text(json.dumps(dets))
        entries.append({"id": sid, "split": "train" if i < cfg.train_scenes else "eval",
                        "annotation": f"scenes/{sid}.json", "features": feat_paths,
                        "detections": f"scenes/{sid}_det.json"})
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"config": cfg.to_dict(), "scenes": entries}, indent=1))
    return manifest


def load_features(paths: dict[str, str], base: Path, height: int, width: int) -> MultiScaleFeatures:
    maps = {name: read_tensor(base / paths[name]) for name in SCALES}
    return MultiScaleFeatures(**maps, height=height, width=width)


def load_dataset(manifest, split: str | None = None) -> list[SynthScene]:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    doc = json.loads(manifest.read_text())
    base = manifest.parent
    out = []
    for e in doc["scenes"]:
        if split is not None and e.get("split") != split:
            continue
        (ann,) = load_annotations(base / e["annotation"])
        feats = load_features(e["features"], base, ann.height, ann.width)
        dets_raw = json.loads((base / e["detections"]).read_text()) if e.get("detections") else {}
        dets = {lv: [np.asarray(p, dtype=np.float64) for p in polys] for lv, polys in dets_raw.items()}
        out.append(SynthScene(ann, feats, dets))
    return out
