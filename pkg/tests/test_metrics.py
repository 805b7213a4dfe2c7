import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rect
from tga.dataio import Line, Paragraph, SceneAnnotation
from tga.geometry import rasterize_polygon
from tga.metrics import (REPORT_KEYS, LevelStats, aggregate, evaluate, iou, iou_matrix,
                         match_masks, paragraph_masks)


def strip(n, start, length, size=10):
    m = np.zeros((1, size))
    m[0, start:start + length] = 1
    return m


def brute_force_stats(preds, gts):
    ious = iou_matrix(preds, gts)
    n, m = ious.shape
    best, best_pairs = -1.0, []
    rows = range(n)
    for cols in itertools.permutations(range(m), min(n, m)):
        for chosen in itertools.combinations(rows, min(n, m)):
            total = sum(ious[r, c] for r, c in zip(chosen, cols))
            if total > best + 1e-12:
                best, best_pairs = total, list(zip(chosen, cols))
    tp = [ious[r, c] for r, c in best_pairs if ious[r, c] > 0.5]
    return len(tp), n - len(tp), m - len(tp), sum(tp)


def test_iou_examples():
    a = strip(1, 0, 4)
    assert iou(a, a) == 1.0
    assert iou(a, strip(1, 5, 3)) == 0.0
    assert iou(strip(1, 1, 2), a) == 0.5
    assert iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))


def test_single_tp_and_fp_hand_check():
    gt = np.stack([strip(1, 0, 5)])
    pred = np.stack([strip(1, 0, 4), strip(1, 7, 2)])  # IoU 0.8, plus a stray FP
    s = match_masks(pred, gt)
    assert (s.tp, s.fp, s.fn) == (1, 1, 0)
    assert s.precision == 0.5 and s.recall == 1.0
    assert s.f1 == pytest.approx(2 / 3, abs=1e-12)
    assert s.pq == pytest.approx(8 / 15, abs=1e-12)


def test_perfect_and_empty_predictions():
    gt = np.stack([strip(1, 0, 3), strip(1, 5, 4)])
    s = match_masks(gt.copy(), gt)
    assert s.as_dict() == {"precision": 1.0, "recall": 1.0, "f1": 1.0, "pq": 1.0,
                           "tp": 2, "fp": 0, "fn": 0, "mean_tp_iou": 1.0}
    none = match_masks(np.zeros((0, 1, 10)), gt)
    assert (none.tp, none.fp, none.fn) == (0, 0, 2)
    assert none.precision == none.recall == none.f1 == none.pq == 0.0
    far = match_masks(np.stack([strip(1, 0, 1)]), np.stack([strip(1, 0, 3)]))
    assert far.tp == 0 and far.pq == 0.0 and far.mean_tp_iou == 0.0


def test_iou_exactly_half_is_not_a_tp():
    s = match_masks(np.stack([strip(1, 0, 2)]), np.stack([strip(1, 0, 4)]))
    assert s.tp == 0 and s.fp == 1 and s.fn == 1


def random_masks(rng, k, shape=(6, 6)):
    base = rng.random((k, *shape)) > 0.5
    base[:, 0, 0] = True
    return base.astype(float)


def noisy_copies(rng, gts, flip=0.15):
    out = gts.copy()
    noise = rng.random(out.shape) < flip
    out[noise] = 1 - out[noise]
    return out


@settings(max_examples=40)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_swap_symmetry(n, m, seed):
    rng = np.random.default_rng(seed)
    gts = random_masks(rng, m)
    preds = np.concatenate([noisy_copies(rng, gts[:n]), random_masks(rng, max(0, n - m))])
    a = match_masks(preds, gts)
    b = match_masks(gts, preds)
    assert a.precision == b.recall and a.recall == b.precision
    assert a.f1 == pytest.approx(b.f1, abs=1e-12)
    assert a.pq == pytest.approx(b.pq, abs=1e-12)


@settings(max_examples=40)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_raising_a_tp_iou_never_lowers_pq(n, seed):
    rng = np.random.default_rng(seed)
    s = LevelStats(int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(0, 4)))
    ious = rng.uniform(0.51, 0.95, size=s.tp)
    lo = LevelStats(s.tp, s.fp, s.fn, float(ious.sum()))
    ious[0] = rng.uniform(ious[0], 1.0)
    hi = LevelStats(s.tp, s.fp, s.fn, float(ious.sum()))
    assert hi.pq >= lo.pq
    assert 0.0 <= lo.pq <= lo.f1 <= 1.0


@pytest.mark.parametrize("seed", range(60))
def test_matching_is_optimal_against_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 6))
    n = int(rng.integers(1, 6))
    gts = random_masks(rng, m)
    preds = noisy_copies(rng, gts[rng.permutation(m)][:n], flip=float(rng.uniform(0.05, 0.3)))
    if n > m:
        preds = np.concatenate([preds, random_masks(rng, n - m)])
    s = match_masks(preds, gts)
    tp, fp, fn, iou_sum = brute_force_stats(preds, gts)
    assert (s.tp, s.fp, s.fn) == (tp, fp, fn)
    assert s.iou_sum == pytest.approx(iou_sum, abs=1e-12)


def _scene():
    l1 = Line([rect(0, 0, 8, 4), rect(10, 0, 16, 4)], rect(0, 0, 16, 4))
    l2 = Line([rect(0, 8, 8, 12)], rect(0, 8, 8, 12))
    l3 = Line([rect(24, 0, 30, 4)], rect(24, 0, 30, 4))
    return SceneAnnotation("m", 16, 32, [Paragraph([l1, l2]), Paragraph([l3])])


def test_ground_truth_as_prediction_scores_one():
    ann = _scene()
    for level in ("word", "line"):
        masks = ann.masks(level)
        rep = evaluate(masks, ann.groups(level, "paragraph"), ann, level)
        for name in ("instance", "paragraph"):
            assert rep[name].pq == 1.0 and rep[name].f1 == 1.0


def test_wrong_grouping_hurts_only_paragraph_level():
    ann = _scene()
    masks = ann.masks("line")
    rep = evaluate(masks, [[0], [1], [2]], ann, "line")
    assert rep["instance"].pq == 1.0
    assert (rep["paragraph"].tp, rep["paragraph"].fp, rep["paragraph"].fn) == (2, 1, 0)
    np.testing.assert_array_equal(paragraph_masks(masks, [[0, 1]])[0], ann.masks("paragraph")[0])
    with pytest.raises(ValueError):
        evaluate(masks, [[0]], ann, "paragraph")


def test_aggregate_is_micro_average():
    ann = _scene()
    masks = ann.masks("line")
    good = evaluate(masks, [[0, 1], [2]], ann, "line")
    bad = evaluate(masks, [[0, 1, 2]], ann, "line")
    total = aggregate([good, bad])
    p = total["paragraph"]
    # the all-in-one group still covers paragraph 0 at IoU 96/120
    assert bad["paragraph"].mean_tp_iou == pytest.approx(0.8)
    assert (p.tp, p.fp, p.fn) == (3, 0, 1)
    assert p.precision == 1.0 and p.recall == pytest.approx(0.75)
    assert p.mean_tp_iou == pytest.approx(2.8 / 3)
    doc = json.loads(total.to_json())
    assert set(doc) == {"instance", "paragraph"}
    assert set(doc["paragraph"]) == set(REPORT_KEYS)


def test_rasterized_masks_evaluate_consistently():
    ann = _scene()
    pred = np.stack([rasterize_polygon(rect(0, 0, 16, 5), 16, 32)])
    rep = evaluate(pred, [[0]], ann, "line")
    assert rep["instance"].tp == 1
    assert rep["instance"].mean_tp_iou == pytest.approx(64 / 80)
