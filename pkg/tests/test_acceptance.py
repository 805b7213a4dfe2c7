"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``.  The learning criteria (8-11)
train D=32 heads on the default synthetic set and take several minutes.
"""

import functools
import hashlib
import itertools
import math
import time

import numpy as np
import pytest

from tga.cascade import CascadeConfig
from tga.cli import main as cli
from tga.dataio import PortableRng, SynthConfig, synth_scene
from tga.geometry import (RegionSet, contour_polygon, extract_instances, rasterize_polygon,
                          unify_regions)
from tga.head import affinity_loss, dice_loss, group_instances
from tga.matching import GroupTargets, build_targets, hungarian
from tga.metrics import iou, match_masks
from tga.model import TGAConfig, init_tga_params, prepare_scene, scene_loss
from tga.numerics import Tensor, finite_diff_check
from tga.training import TrainConfig, evaluate_scenes, model_functions, train

SEEDS = (0, 1, 2)
DIM = 32


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1 gradients

def test_01_full_pipeline_gradients(capsys):
    start = time.perf_counter()
    synth = SynthConfig(height=128, width=128, paragraphs=2, lines_per_paragraph=2,
                        words_per_line=2, channels=5, position_freqs=1)
    cfg = TGAConfig(dim=8, layers=1, heads=2, hidden=16, channels=5, capacity=4)
    prep = prepare_scene(synth_scene(synth, 0), cfg)
    assert prep.instances.valid.sum() == 4 and prep.low_masks.shape == (4, 16, 16)
    # seed 3 keeps every ReLU input clear of its kink by more than the probe step
    params = init_tga_params(cfg, PortableRng(3))
    err = finite_diff_check(lambda p: scene_loss(prep, p, cfg)["total"], params)
    elapsed = time.perf_counter() - start
    report(capsys, 1, err <= 1e-4 and elapsed < 60,
           f"max relative error {err:.2e} over {params.num_values()} weights, {elapsed:.1f} s")


# ---------------------------------------------------------------- 2 Hungarian

def brute_force_cost(cost):
    n, m = cost.shape
    k = min(n, m)
    if k == 0:
        return 0.0
    best = math.inf
    for rows in itertools.combinations(range(n), k):
        for cols in itertools.permutations(range(m), k):
            best = min(best, sum(cost[r, c] for r, c in zip(rows, cols)))
    return best


def test_02_hungarian_against_brute_force(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(200):
        n, m = (int(x) for x in rng.integers(1, 8, size=2))
        cost = rng.random((n, m))
        a = hungarian(cost)
        total = sum(cost[p, g] for p, g in a.pairs.items())
        ok = (len(a.pairs) == min(n, m) and len(set(a.pairs.values())) == len(a.pairs)
              and abs(total - brute_force_cost(cost)) <= 1e-12 and abs(a.cost - total) <= 1e-12)
        bad += not ok
    elapsed = time.perf_counter() - start
    report(capsys, 2, bad == 0 and elapsed < 10, f"{bad} mismatches in 200, {elapsed:.1f} s")


# ---------------------------------------------------------------- 3 grouping

def closure_partition(adj):
    """Warshall transitive closure of a symmetric, reflexive relation."""
    n = len(adj)
    r = adj.copy() | np.eye(n, dtype=bool)
    for k in range(n):
        r = r | (r[:, [k]] & r[[k], :])
    classes = {tuple(np.flatnonzero(row)) for row in r}
    return sorted(classes)


def test_03_grouping_is_transitive_closure(capsys):
    rng = np.random.default_rng(77)
    bad = 0
    for _ in range(100):
        n = int(rng.integers(1, 11))
        a = rng.random((n, n))
        a = (a + a.T) / 2
        t = float(rng.uniform(0.2, 0.9))
        got = sorted(tuple(g) for g in group_instances(a, np.ones(n, bool), t))
        bad += got != closure_partition(a >= t)
    report(capsys, 3, bad == 0, f"{bad} mismatches in 100")


# ---------------------------------------------------------------- 4 loss identities

def full_targets(masks, affinity):
    n = len(masks)
    return GroupTargets(masks, np.asarray(affinity, float), np.ones((n, n)),
                        np.ones(n, bool), np.arange(n), np.zeros(n, int))


def test_04_loss_identities(capsys):
    rng = np.random.default_rng(4)
    m = (rng.random((3, 8, 8)) > 0.5).astype(float)
    m[:, 0, 0] = 1
    t = full_targets(m, np.eye(3))
    same = dice_loss(Tensor(m), t).item()
    disjoint = dice_loss(Tensor(1 - m), t).item()
    n = 5
    a = np.kron(np.eye(2), np.ones((3, 3)))[:n, :n]
    ta = full_targets(np.zeros((n, 1, 1)), a)
    half = affinity_loss(Tensor(np.full((n, n), 0.5)), ta).item()
    near = affinity_loss(Tensor(np.clip(a, 1e-9, 1 - 1e-9)), ta).item()
    ok = (abs(same) <= 1e-12 and abs(disjoint - 1) <= 1e-12
          and abs(half - math.log(2)) <= 1e-9 and near <= 1e-6)
    report(capsys, 4, ok, f"dice same {same:.1e}, disjoint {disjoint:.12f}, "
                          f"affinity at 0.5 {half:.12f}, near-perfect {near:.1e}")


# ---------------------------------------------------------------- 5 one-to-many

def test_05_one_to_many_contract(capsys):
    bad = []
    for index in range(50):
        scene = synth_scene(SynthConfig(seed=11), index)
        ann = scene.annotation
        inst = unify_regions(RegionSet("polygons", scene.detections["line"]), 32,
                             ann.height, ann.width)
        t = build_targets(inst.masks, inst.valid, ann, "line", "paragraph")
        idx = np.flatnonzero(t.matched)
        rows_ok = all(t.group_masks[i].tobytes() == t.group_masks[j].tobytes()
                      for i in idx for j in idx if t.group_index[i] == t.group_index[j])
        rel = ((t.affinity == 1) & (t.weight == 1))[np.ix_(idx, idx)]
        r = rel.astype(int)
        equivalence = rel.diagonal().all() and (rel == rel.T).all() and ((r @ r > 0) <= rel).all()
        if not (rows_ok and equivalence and len(idx) == 9):
            bad.append(index)
    report(capsys, 5, not bad, f"{len(bad)} of 50 scenes violate the contract")


# ---------------------------------------------------------------- 6 geometry

def convex_polygon(rng, size=160, min_side=20.0):
    while True:
        k = int(rng.integers(3, 9))
        radius = rng.uniform(30, 70)
        cx, cy = rng.uniform(radius + 1, size - radius - 1, size=2)
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        pts = np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)
        if np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1).min() >= min_side:
            return pts


def test_06_geometry_round_trip(capsys):
    rng = np.random.default_rng(6)
    worst = 1.0
    for _ in range(100):
        m = rasterize_polygon(convex_polygon(rng), 160, 160)
        comps = extract_instances(m)
        back = rasterize_polygon(contour_polygon(comps[0]), 160, 160) if len(comps) == 1 else 0 * m
        worst = min(worst, iou(back, m))
    report(capsys, 6, worst >= 0.95, f"worst IoU {worst:.4f} over 100 polygons")


# ---------------------------------------------------------------- 7 metrics

def test_07_metric_hand_checks(capsys):
    gt = np.zeros((1, 1, 10))
    gt[0, 0, :5] = 1
    pred = np.zeros((2, 1, 10))
    pred[0, 0, :4] = 1         # IoU 0.8
    pred[1, 0, 7:9] = 1        # false positive
    s = match_masks(pred, gt)
    perfect = match_masks(gt.copy(), gt)
    ok = (abs(s.f1 - 2 / 3) <= 1e-12 and abs(s.pq - 8 / 15) <= 1e-12
          and all(v == 1.0 for v in (perfect.precision, perfect.recall, perfect.f1, perfect.pq)))
    report(capsys, 7, ok, f"F {s.f1:.15f}, PQ {s.pq:.15f}, perfect PQ {perfect.pq}")


# ---------------------------------------------------------------- shared training runs

@functools.lru_cache(maxsize=None)
def scenes():
    cfg = SynthConfig()
    all_scenes = [synth_scene(cfg, i) for i in range(cfg.train_scenes + cfg.eval_scenes)]
    return all_scenes[:cfg.train_scenes], all_scenes[cfg.train_scenes:]


@functools.lru_cache(maxsize=None)
def run(kind: str, seed: int):
    """Train one configuration for 500 steps and score the eval split."""
    if kind == "cascade":
        cfg = CascadeConfig(TGAConfig(dim=DIM, instance_level="word", group_level="line",
                                      alpha_group=0.0),
                            TGAConfig(dim=DIM))
    elif kind == "word":
        cfg = TGAConfig(dim=DIM, instance_level="word")
    else:
        cfg = TGAConfig(dim=DIM, alpha_dice=0.0 if kind == "no-gmp" else 1.0,
                        mask_loss="bce" if kind == "bce" else "dice")
    train_set, eval_set = scenes()
    _, prepare, _, _ = model_functions(cfg)
    params, _ = train([prepare(s, cfg) for s in train_set], cfg, TrainConfig(steps=500, seed=seed))
    rep = evaluate_scenes([prepare(s, cfg, with_targets=False) for s in eval_set], params, cfg)
    return rep


def mean_pq(kind):
    return float(np.mean([run(kind, s)["paragraph"].pq for s in SEEDS]))


def pq_list(kind):
    return ", ".join(f"{run(kind, s)['paragraph'].pq:.3f}" for s in SEEDS)


# ---------------------------------------------------------------- 8-11 learning

@pytest.mark.slow
def test_08_end_to_end_learning(capsys):
    # timed from scratch: scene synthesis, training and evaluation
    scenes.cache_clear()
    run.cache_clear()
    start = time.perf_counter()
    rep = run("full", 0)
    elapsed = time.perf_counter() - start
    pq, f1 = rep["paragraph"].pq, rep["instance"].f1
    report(capsys, 8, pq >= 0.90 and f1 >= 0.95 and elapsed < 600,
           f"paragraph PQ {pq:.3f}, instance F {f1:.3f}, {elapsed:.0f} s")


@pytest.mark.slow
def test_09_group_mask_prediction_helps(capsys):
    full, ablated = mean_pq("full"), mean_pq("no-gmp")
    report(capsys, 9, ablated < full,
           f"mean paragraph PQ full {full:.3f} [{pq_list('full')}] vs "
           f"no-gmp {ablated:.3f} [{pq_list('no-gmp')}]")


@pytest.mark.slow
def test_10_bce_mask_loss_is_no_better(capsys):
    dice, bce = mean_pq("full"), mean_pq("bce")
    report(capsys, 10, bce <= dice,
           f"mean paragraph PQ dice {dice:.3f} [{pq_list('full')}] vs "
           f"bce {bce:.3f} [{pq_list('bce')}]")


@pytest.mark.slow
def test_11_cascade_versus_single(capsys):
    single, cascade = mean_pq("word"), mean_pq("cascade")
    report(capsys, 11, cascade >= single,
           f"mean paragraph PQ on word instances: cascade {cascade:.3f} "
           f"[{pq_list('cascade')}] vs single {single:.3f} [{pq_list('word')}]")


# ---------------------------------------------------------------- 12 determinism

def digest(paths):
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_12_runs_are_bit_identical(tmp_path, capsys):
    hashes = []
    for k in range(2):
        root = tmp_path / f"run{k}"
        assert cli(["gen", str(root / "data"), "--seed", "5"]) == 0
        assert cli(["train", "--data", str(root / "data"), "--out", str(root / "ck"),
                    "--steps", "20", "--seed", "5"]) == 0
        assert cli(["eval", "--checkpoint", str(root / "ck"), "--data", str(root / "data"),
                    "--report", str(root / "report.json")]) == 0
        ck = root / "ck"
        hashes.append({
            "data": digest(sorted(p for p in (root / "data").rglob("*") if p.is_file())),
            "loss": digest([ck / "loss.csv"]),
            "checkpoint": digest(sorted(p for p in ck.iterdir() if p.name != "loss.csv")),
            "report": digest([root / "report.json"]),
        })
    same = [k for k in hashes[0] if hashes[0][k] == hashes[1][k]]
    report(capsys, 12, len(same) == 4, f"identical across two runs: {', '.join(same)}")
