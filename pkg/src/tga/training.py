"""Momentum gradient descent, evaluation and checkpoints for a single TGA."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import PortableRng, read_tensor, write_tensor
from .metrics import EvalReport, aggregate, evaluate
from .cascade import (CascadeConfig, cascade_loss, init_cascade_params, predict_cascade_groups,
                      prepare_cascade_scene)
from .model import (PreparedScene, TGAConfig, init_tga_params, predict_groups, prepare_scene,
                    scene_loss)
from .numerics import ParamStore

LOSS_COLUMNS = ("step", "loss", "mask", "group")


class NumericalError(FloatingPointError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class Optimizer:
    """Plain heavy-ball momentum: v <- mu v + g;  w <- w - lr v."""
    lr: float = 0.03
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]):
        for name, t in params.items():
            g = grads[name]
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            t.data -= self.lr * v


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 0.03
    momentum: float = 0.9
    batch_size: int = 4
    seed: int = 0
    clip_norm: float = 1.0        # gradient-norm clip (per cascade stage); 0 disables
    warmup: int = 0               # linear warm-up steps
    decay: bool = False           # cosine decay of the learning rate to zero


def learning_rate(step: int, tcfg: TrainConfig) -> float:
    scale = 1.0
    if step < tcfg.warmup:
        scale = (step + 1) / tcfg.warmup
    elif tcfg.decay:
        span = max(1, tcfg.steps - tcfg.warmup)
        scale = 0.5 * (1.0 + math.cos(math.pi * (step - tcfg.warmup) / span))
    return tcfg.lr * scale


def model_functions(cfg):
    """(init, prepare, loss, predict) for a single TGA or a cascade."""
    if isinstance(cfg, CascadeConfig):
        return init_cascade_params, prepare_cascade_scene, cascade_loss, predict_cascade_groups
    return init_tga_params, prepare_scene, scene_loss, predict_groups


def batches(n: int, batch_size: int, rng: PortableRng):
    """Endless stream of index batches: reshuffled epochs, deterministic under ``rng``."""
    order: list[int] = []
    while True:
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = rng.permutation(n)
            batch.append(order.pop())
        yield batch


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float,
                   stages: Sequence[str] = ()) -> float:
    """Rescale in place to norm ``max_norm``; returns the norm before clipping.

    With ``stages`` (name prefixes) each stage is clipped on its own, so one
    stage's large gradient does not shrink the other's step.
    """
    if stages:
        parts = [clip_gradients({n: g for n, g in grads.items() if n.startswith(p)}, max_norm)
                 for p in stages]
        return math.sqrt(sum(x * x for x in parts))
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def accumulate(loss_fn: Callable[[object], dict], items: Sequence, params: ParamStore):
    """Average losses and gradients over ``items``; returns (grads, mean loss parts)."""
    params.zero_grad()
    parts: dict[str, float] = {}
    for item in items:
        out = loss_fn(item)
        total = out["total"]
        if total.requires_grad:
            total.backward(np.asarray(1.0 / len(items)))
        for k, v in out.items():
            parts[k] = parts.get(k, 0.0) + v.item() / len(items)
    grads = {n: g.copy() for n, g in params.grads().items()}
    params.zero_grad()
    return grads, parts


def train(scenes: Sequence, cfg: TGAConfig | CascadeConfig, tcfg: TrainConfig,
          params: ParamStore | None = None,
          on_step: Callable[[dict], None] | None = None) -> tuple[ParamStore, list[dict]]:
    init, prepare, loss_fn, _ = model_functions(cfg)
    rng = PortableRng(tcfg.seed)
    if params is None:
        params = init(cfg, rng)
    prepared = [s if isinstance(s, PreparedScene) else prepare(s, cfg) for s in scenes]
    opt = Optimizer(tcfg.lr, tcfg.momentum)
    stream = batches(len(prepared), min(tcfg.batch_size, len(prepared)), rng)
    stages = ("word.", "line.") if isinstance(cfg, CascadeConfig) else ()
    log = []
    for step in range(tcfg.steps):
        batch = [prepared[i] for i in next(stream)]
        grads, parts = accumulate(lambda p: loss_fn(p, params, cfg), batch, params)
        if not all(math.isfinite(v) for v in parts.values()):
            raise NumericalError(step, f"non-finite loss {parts}")
        norm = clip_gradients(grads, tcfg.clip_norm, stages)
        if not math.isfinite(norm):
            raise NumericalError(step, "non-finite gradient")
        opt.lr = learning_rate(step, tcfg)
        opt.step(params, grads)
        row = {"step": step, "loss": parts["total"], "mask": parts["mask"], "group": parts["group"],
               "grad_norm": norm}
        log.append(row)
        if on_step:
            on_step(row)
    return params, log


def evaluate_scenes(scenes: Sequence, params: ParamStore, cfg: TGAConfig | CascadeConfig,
                    threshold: float | None = None) -> EvalReport:
    _, prepare, _, predict = model_functions(cfg)
    reports = []
    for s in scenes:
        prep = s if isinstance(s, PreparedScene) else prepare(s, cfg, with_targets=False)
        groups, _ = predict(prep, params, cfg, threshold)
        reports.append(evaluate(prep.instances.masks, groups, prep.annotation,
                                cfg.instance_level, cfg.group_level))
    return aggregate(reports)


def write_loss_csv(path, log: list[dict]):
    lines = [",".join(LOSS_COLUMNS)]
    lines += [",".join([str(r["step"])] + [repr(float(r[c])) for c in LOSS_COLUMNS[1:]]) for r in log]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(directory, params: ParamStore, hyper: dict):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, t) in enumerate(sorted(params.items())):
        fname = f"p{i:04d}.tnsr"
        data = t.data.reshape(1) if t.data.ndim == 0 else t.data
        write_tensor(d / fname, data)
        entries.append({"name": name, "dims": list(t.data.shape), "file": fname})
    manifest = {"hyperparameters": hyper, "params": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory) -> tuple[ParamStore, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    params = ParamStore()
    for e in manifest["params"]:
        arr = read_tensor(d / e["file"]).reshape(e["dims"])
        params[e["name"]] = arr
    return params, manifest["hyperparameters"]


def round_to_float32(params: ParamStore):
    """Checkpoints store float32; rounding in memory keeps saved and live weights identical."""
    for _, t in params.items():
        t.data[...] = t.data.astype(np.float32)
