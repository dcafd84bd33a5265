import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostage_bev.geometry import Box3D, iou_3d_aligned
from twostage_bev.metrics import (TP_NAMES, average_precision, evaluate, match, nds, pair_errors,
                                  precision_recall, tp_errors)

CLASSES = ("car", "van", "post")


def box(x, y, score=1.0, cls=0, yaw=0.0, size=(4, 1.8, 1.5), vel=(0, 0)):
    return Box3D(center=[x, y, 0.7], size=size, yaw=yaw, velocity=vel, class_id=cls, score=score)


def test_exact_prediction_matches_every_threshold():
    for t in (0.5, 1, 2, 4):
        m = match([[box(1, 2, 0.9)]], [[box(1, 2)]], t)
        assert m.is_tp.tolist() == [True]


def test_three_metres_away_only_at_four():
    got = [match([[box(3, 0, 0.9)]], [[box(0, 0)]], t).is_tp[0] for t in (0.5, 1, 2, 4)]
    assert got == [False, False, False, True]


def brute_pr(preds, gts, thr):
    """Reference matcher: rescans every gt for each prediction in score order."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1].score)
    taken = set()
    tp, fp, out_p, out_r = 0, 0, [], []
    for i in order:
        f, p = preds[i]
        cands = [(np.hypot(*(p.center[:2] - g.center[:2])), j) for j, (gf, g) in enumerate(gts)
                 if gf == f and j not in taken and g.class_id == p.class_id]
        if cands and min(cands)[0] <= thr:
            taken.add(min(cands)[1])
            tp += 1
        else:
            fp += 1
        out_p.append(tp / (tp + fp))
        out_r.append(tp / len(gts))
    return np.array(out_p), np.array(out_r)


def test_pr_curve_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n_frames = 2
        gts = [(int(rng.integers(n_frames)), box(*rng.uniform(-5, 5, 2))) for _ in range(6)]
        preds = []
        for _ in range(10):
            f, g = gts[rng.integers(6)]
            preds.append((f, box(*(g.center[:2] + rng.normal(0, 1.0, 2)), score=float(rng.random()))))
        pf = [[p for f, p in preds if f == k] for k in range(n_frames)]
        gf = [[g for f, g in gts if f == k] for k in range(n_frames)]
        for thr in (0.5, 1, 2, 4):
            prec, rec = precision_recall(match(pf, gf, thr))
            bp, br = brute_pr(preds, gts, thr)
            np.testing.assert_allclose(prec, bp)
            np.testing.assert_allclose(rec, br)


def test_matching_invariant_to_input_order():
    rng = np.random.default_rng(1)
    gt = [[box(*rng.uniform(-5, 5, 2)) for _ in range(5)]]
    preds = [box(*rng.uniform(-5, 5, 2), score=float(s)) for s in rng.random(8)]
    a = match([preds], gt, 2.0)
    perm = rng.permutation(8)
    b = match([[preds[i] for i in perm]], gt, 2.0)
    assert a.is_tp.tolist() == b.is_tp.tolist()
    np.testing.assert_array_equal(a.scores, b.scores)


def test_ap_extremes():
    gt = [[box(0, 0), box(10, 0)], [box(5, 5)]]
    perfect = [[b.replace(score=0.9) for b in f] for f in gt]
    assert average_precision(match(perfect, gt, 0.5)) == pytest.approx(1.0)
    assert average_precision(match([[], []], gt, 4.0)) == 0.0


def test_ap_hand_computed():
    gt = [[box(0, 0), box(20, 0)]]
    preds = [[box(0, 0, 0.9), box(-10, 0, 0.5)]]
    # PR points (p=1, r=.5), (p=.5, r=.5); interpolated precision is 1 for r<.5,
    # 0.5 at r=.5 and 0 beyond.  Bins r=.11...1.0: 39 at 1, one at .5, 50 at 0.
    expected = (39 * 0.9 + 0.4) / 90 / 0.9
    assert average_precision(match(preds, gt, 1.0)) == pytest.approx(expected, abs=1e-12)


def test_tp_errors_identity_and_flip():
    b = box(1, 2, yaw=0.3, vel=(1, 2))
    assert all(v == 0.0 for v in pair_errors(b, b).values())
    assert pair_errors(b.replace(yaw=0.3 + np.pi), b)["mAOE"] == pytest.approx(np.pi)


def test_tp_errors_formula_oracle():
    rng = np.random.default_rng(2)
    pairs = []
    for _ in range(20):
        g = box(*rng.uniform(-5, 5, 2), yaw=rng.uniform(-3, 3), size=rng.uniform(1, 4, 3), vel=rng.normal(size=2))
        p = box(*(g.center[:2] + rng.normal(0, 0.5, 2)), yaw=rng.uniform(-3, 3), size=rng.uniform(1, 4, 3),
                vel=rng.normal(size=2))
        pairs.append((p, g))
    errs = tp_errors(pairs)
    ate = np.mean([np.sqrt((p.center[0] - g.center[0]) ** 2 + (p.center[1] - g.center[1]) ** 2) for p, g in pairs])
    ase = np.mean([1 - np.prod(np.minimum(p.size, g.size)) /
                   (np.prod(p.size) + np.prod(g.size) - np.prod(np.minimum(p.size, g.size))) for p, g in pairs])
    aoe = np.mean([min(abs(p.yaw - g.yaw), 2 * np.pi - abs(p.yaw - g.yaw)) for p, g in pairs])
    ave = np.mean([np.sqrt(((p.velocity - g.velocity) ** 2).sum()) for p, g in pairs])
    assert errs["mATE"] == pytest.approx(ate, abs=1e-12)
    assert errs["mASE"] == pytest.approx(ase, abs=1e-12)
    assert errs["mAOE"] == pytest.approx(aoe, abs=1e-12)
    assert errs["mAVE"] == pytest.approx(ave, abs=1e-12)
    assert errs["mAAE"] == 0.0
    assert iou_3d_aligned([1, 1, 1], [2, 1, 1]) == pytest.approx(0.5)


def test_nds_examples():
    zero = {k: 0.0 for k in TP_NAMES}
    assert nds(1.0, zero) == pytest.approx(1.0)
    assert nds(0.0, {k: 1.5 for k in TP_NAMES}) == 0.0
    assert nds(0.5, {k: 0.5 for k in TP_NAMES}) == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.lists(st.floats(0, 3), min_size=5, max_size=5), st.floats(0, 0.5),
       st.integers(0, 4), st.floats(0, 1))
def test_nds_monotone(mAP, errs, d_map, which, d_err):
    e = dict(zip(TP_NAMES, errs))
    base = nds(mAP, e)
    assert 0.0 <= base <= 1.0
    assert nds(min(1.0, mAP + d_map), e) >= base
    worse = dict(e)
    worse[TP_NAMES[which]] += d_err
    assert nds(mAP, worse) <= base


def test_evaluate_oracle_and_empty(tmp_path):
    rng = np.random.default_rng(3)
    gt = [[box(*rng.uniform(-20, 20, 2), cls=int(rng.integers(3)), yaw=rng.uniform(-3, 3)) for _ in range(4)]
          for _ in range(5)]
    oracle = evaluate(gt, gt, CLASSES)
    assert oracle.summary["NDS"] == pytest.approx(1.0, abs=1e-9)
    empty = evaluate([[] for _ in gt], gt, CLASSES)
    assert empty.summary["mAP"] == 0.0
    oracle.dump(tmp_path / "m.json")
    rec = json.loads((tmp_path / "m.json").read_text())
    assert set(rec["summary"]) >= {"NDS", "mAP", *TP_NAMES}
    assert set(rec["per_class"]) <= set(CLASSES)
