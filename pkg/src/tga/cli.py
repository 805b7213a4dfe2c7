"""Command-line entry points: ``tga gen | train | infer | eval``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import colorsys
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .cascade import CascadeConfig, init_cascade_params
from .dataio import (AnnotationError, FormatError, PortableRng, SynthConfig, load_dataset,
                     parallel_map, write_dataset)
from .geometry import contour_polygon
from .metrics import aggregate, evaluate
from .model import TGAConfig, init_tga_params
from .training import (NumericalError, TrainConfig, load_checkpoint, model_functions,
                       round_to_float32, save_checkpoint, train, write_loss_csv)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DESK_DIM = 32


class DataError(Exception):
    """Bad or inconsistent input files; maps to exit code 3."""


# ---------------------------------------------------------------- run configuration

def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise DataError(f"{path}: expected a JSON object")
    return doc


_MODEL_FLAGS = {"dim": "dim", "layers": "layers", "heads": "heads", "hidden": "hidden",
                "threshold": "threshold", "alpha_dice": "alpha_dice",
                "alpha_group": "alpha_group", "mask_loss": "mask_loss", "capacity": "capacity"}
_TRAIN_FLAGS = {"steps": "steps", "lr": "lr", "momentum": "momentum",
                "batch_size": "batch_size", "seed": "seed", "clip_norm": "clip_norm"}


def run_config(args) -> tuple[TGAConfig | CascadeConfig, TrainConfig]:
    """Merge the --config file (flat keys) with command-line overrides."""
    doc = _read_json(args.config) if getattr(args, "config", None) else {}
    model_keys = {f.name for f in fields(TGAConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - model_keys - train_keys - {"cascade", "stop_gradient"}
    if unknown:
        raise DataError(f"unknown run config keys: {sorted(unknown)}")
    m = {"dim": DESK_DIM, **{k: v for k, v in doc.items() if k in model_keys}}
    t = {k: v for k, v in doc.items() if k in train_keys}
    for flag, key in _MODEL_FLAGS.items():
        if getattr(args, flag, None) is not None:
            m[key] = getattr(args, flag)
    for flag, key in _TRAIN_FLAGS.items():
        if getattr(args, flag, None) is not None:
            t[key] = getattr(args, flag)
    if getattr(args, "no_gmp", False):
        m["alpha_dice"] = 0.0
    if getattr(args, "no_pixel_embedding", False):
        m["pixel_embedding"] = False
    if getattr(args, "enhanced", False):
        m["enhanced"] = True
    cascade = bool(doc.get("cascade", False) or getattr(args, "cascade", False))
    try:
        tcfg = TrainConfig(**t)
        if not cascade:
            return TGAConfig(**m), tcfg
        word = TGAConfig(**{**m, "instance_level": "word", "group_level": "line",
                            "alpha_group": 0.0})
        line = TGAConfig(**{**m, "instance_level": "line", "group_level": "paragraph"})
        return CascadeConfig(word, line, stop_gradient=doc.get("stop_gradient", True)), tcfg
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid run configuration: {exc}") from None


def config_to_dict(cfg) -> dict:
    kind = "cascade" if isinstance(cfg, CascadeConfig) else "single"
    return {"kind": kind, "model": cfg.to_dict()}


def config_from_dict(d: dict):
    try:
        if d["kind"] == "cascade":
            return CascadeConfig.from_dict(d["model"])
        return TGAConfig.from_dict(d["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"checkpoint hyperparameters are invalid: {exc}") from None


def check_params(params, cfg):
    """Checkpoint names and shapes must match what ``cfg`` would build."""
    init = init_cascade_params if isinstance(cfg, CascadeConfig) else init_tga_params
    want = {n: t.data.shape for n, t in init(cfg, PortableRng(0)).items()}
    got = {n: t.data.shape for n, t in params.items()}
    missing = sorted(set(want) - set(got))
    extra = sorted(set(got) - set(want))
    if missing or extra:
        raise DataError(f"checkpoint does not fit the configuration: missing {missing[:3]}, "
                        f"unexpected {extra[:3]}")
    for n, shape in want.items():
        if got[n] != shape:
            raise DataError(f"parameter {n} has dims {got[n]}, configuration needs {shape}")


def _load_checkpoint(args):
    path = Path(args.checkpoint)
    if not (path / "manifest.json").is_file():
        raise DataError(f"{path} is not a checkpoint directory (no manifest.json)")
    try:
        params, hyper = load_checkpoint(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None
    cfg = config_from_dict(hyper)
    dim = getattr(args, "dim", None)
    cfg_dim = cfg.word.dim if isinstance(cfg, CascadeConfig) else cfg.dim
    if dim is not None and dim != cfg_dim:
        raise DataError(f"checkpoint has D={cfg_dim}, command line asks for D={dim}")
    check_params(params, cfg)
    return params, cfg


def _load_scenes(data, split=None):
    path = Path(data)
    manifest = path / "manifest.json" if path.is_dir() else path
    if not manifest.is_file():
        raise DataError(f"no dataset manifest at {manifest}")
    try:
        scenes = load_dataset(manifest, split)
    except (OSError, KeyError, ValueError, FormatError, AnnotationError) as exc:
        raise DataError(f"cannot load dataset {manifest}: {exc}") from None
    if not scenes:
        raise DataError(f"dataset {manifest} has no scenes" + (f" in split {split!r}" if split else ""))
    return scenes


def _check_writable(path: Path):
    """Fail before doing any work if ``path`` cannot be created."""
    parent = path if path.is_dir() else path.parent
    while not parent.exists():
        parent = parent.parent
    if not parent.is_dir():
        raise DataError(f"cannot write under {parent}: not a directory")
    if not os.access(parent, os.W_OK):
        raise DataError(f"cannot write under {parent}: permission denied")


# ---------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid synthetic config: {exc}") from None
    out = Path(args.out)
    _check_writable(out)
    try:
        # every scene is generated before the first file is written
        manifest = write_dataset(out, cfg, args.workers)
    except ValueError as exc:
        raise DataError(f"invalid synthetic config: {exc}") from None
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc.strerror}") from None
    print(manifest)
    return EXIT_OK


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg, tcfg = run_config(args)
    scenes = _load_scenes(args.data, "train")
    channels = scenes[0].feats.channels
    if isinstance(cfg, CascadeConfig):
        cfg.word.channels = channels
        cfg.line.channels = channels
    else:
        cfg.channels = channels
    out = Path(args.out)
    _check_writable(out)

    def log(row):
        if args.verbose and row["step"] % 50 == 0:
            print(f"step {row['step']:5d}  loss {row['loss']:.5f}", file=sys.stderr)

    try:
        params, rows = train(scenes, cfg, tcfg, on_step=log)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    round_to_float32(params)
    hyper = {**config_to_dict(cfg), "train": asdict(tcfg)}
    save_checkpoint(out, params, hyper)
    write_loss_csv(out / "loss.csv", rows)
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------- infer

def _palette(k: int) -> str:
    # golden-ratio hue steps give well separated, deterministic colours
    r, g, b = colorsys.hsv_to_rgb((k * 0.618033988749895) % 1.0, 0.65, 0.9)
    return f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"


def render_svg(masks: np.ndarray, groups: list[list[int]], height: int, width: int) -> str:
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for k, g in enumerate(groups):
        colour = _palette(k)
        parts.append(f'<g id="group{k}" fill="{colour}" fill-opacity="0.6" stroke="{colour}">')
        for i in g:
            poly = contour_polygon(masks[i])
            pts = " ".join(f"{x:g},{y:g}" for x, y in poly)
            parts.append(f'<polygon data-instance="{i}" points="{pts}"/>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def infer_scene(scene, params, cfg, threshold: float | None):
    _, prepare, _, predict = model_functions(cfg)
    prep = prepare(scene, cfg, with_targets=False)
    groups, _ = predict(prep, params, cfg, threshold)
    return prep, groups


def cmd_infer(args) -> int:
    params, cfg = _load_checkpoint(args)
    _check_threshold(args.threshold)
    scenes = _load_scenes(args.data)
    by_id = {s.annotation.image_id: s for s in scenes}
    if args.scene not in by_id:
        raise DataError(f"scene {args.scene!r} is not in the dataset")
    for p in (args.out, args.svg):
        if p:
            _check_writable(Path(p))
    scene = by_id[args.scene]
    prep, groups = infer_scene(scene, params, cfg, args.threshold)
    masks = prep.instances.masks
    group_of = {i: k for k, g in enumerate(groups) for i in g}
    source = prep.instances.report.get("source_index", [])
    instances = []
    for i in sorted(group_of):
        instances.append({"index": i, "detection": source[i] if i < len(source) else None,
                          "group": group_of[i], "polygon": contour_polygon(masks[i]).tolist()})
    t = cfg.threshold if args.threshold is None else args.threshold
    doc = {"scene": args.scene, "threshold": t, "instances": instances, "groups": groups}
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    if args.svg:
        ann = scene.annotation
        Path(args.svg).write_text(render_svg(masks, groups, ann.height, ann.width))
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _eval_one(job):
    scene, params, cfg, threshold = job
    prep, groups = infer_scene(scene, params, cfg, threshold)
    return evaluate(prep.instances.masks, groups, prep.annotation, cfg.instance_level,
                    cfg.group_level)


def cmd_eval(args) -> int:
    params, cfg = _load_checkpoint(args)
    _check_threshold(args.threshold)
    scenes = _load_scenes(args.data, args.split)
    if args.report:
        _check_writable(Path(args.report))
    jobs = [(s, params, cfg, args.threshold) for s in scenes]
    report = aggregate(parallel_map(_eval_one, jobs, args.workers)).to_json()
    if args.report:
        Path(args.report).write_text(report + "\n")
    print(report)
    return EXIT_OK


def _check_threshold(t):
    if t is not None and not 0.0 < t < 1.0:
        raise DataError(f"threshold must lie in (0, 1), got {t}")


# ---------------------------------------------------------------- argument parsing

def _model_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("model")
    g.add_argument("--dim", type=int, help=f"embedding dimension D (default {DESK_DIM})")
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--hidden", type=int)
    g.add_argument("--alpha-dice", type=float, help="weight of the group-mask loss")
    g.add_argument("--alpha-group", type=float, help="weight of the affinity loss")
    g.add_argument("--capacity", type=int, help="instance slots per scene")
    g.add_argument("--mask-loss", choices=("dice", "bce", "both"))
    g.add_argument("--no-gmp", action="store_true", help="drop the group-mask loss")
    g.add_argument("--no-pixel-embedding", action="store_true",
                   help="replace P with a single-scale projection of X3")
    g.add_argument("--enhanced", action="store_true", help="two extra refine convs")
    g.add_argument("--cascade", action="store_true", help="word -> line -> paragraph cascade")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tga", description="Text Grouping Adapter toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("out", help="output directory")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a TGA head")
    p.add_argument("--data", required=True, help="dataset manifest or directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config", help="run config JSON (flat keys)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--workers", type=int, default=1, help="accepted for symmetry; training is serial")
    p.add_argument("--verbose", action="store_true")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="group the instances of one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True, help="scene id")
    p.add_argument("--threshold", type=float)
    p.add_argument("--dim", type=int, help="expected D; must match the checkpoint")
    p.add_argument("--out", help="write the JSON here instead of stdout")
    p.add_argument("--svg", help="write an overlay SVG")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--threshold", type=float)
    p.add_argument("--dim", type=int, help="expected D; must match the checkpoint")
    p.add_argument("--report", help="write the report JSON here")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)      # exits with 2 on usage errors
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be at least 1")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"tga: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"tga: numerical failure at {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
