import json

import numpy as np

from twostage_bev.geometry import Box3D, default_rig, iou_2d, iou_bev
from twostage_bev.proposals import (BEV_NMS_IOU, K1, K2, PERS_NMS_IOU, PipelineConfig, Proposal,
                                    gather_topk1, nms_bev, nms_bev_then_topk2, nms_pers, run_pipeline,
                                    view_rects)

RIG = default_rig()


# -- independent brute-force references ------------------------------------------

def brute_nms(n, score, iou, thresh):
    """Repeatedly take the best remaining item and delete everything overlapping it."""
    remaining = set(range(n))
    kept = []
    while remaining:
        best = min(remaining, key=lambda i: (-score[i], i))
        kept.append(best)
        remaining = {j for j in remaining if j != best and not iou(best, j) > thresh}
    return kept


def brute_pipeline(view_props, rig, k1, k2, t_pers=PERS_NMS_IOU, t_bev=BEV_NMS_IOU):
    union = []
    for v, props in enumerate(view_props):
        rects = view_rects([b for b, _ in props], rig, v)
        scores = [s for _, s in props]
        kept = brute_nms(len(props), scores, lambda a, b: iou_2d(rects[a], rects[b]), t_pers)
        kept = sorted(kept, key=lambda i: (-scores[i], i))[:k1]
        union.extend((scores[i], v, i, props[i][0]) for i in kept)
    rank = {(v, i): r for r, (_, v, i, _) in enumerate(sorted(union, key=lambda t: (-t[0], t[1], t[2])))}
    sc = [-float(rank[(v, i)]) for _, v, i, _ in union]  # encode the tie-broken order as scores
    kept = brute_nms(len(union), sc, lambda a, b: iou_bev(union[a][3], union[b][3]), t_bev)
    kept = sorted(kept, key=lambda j: -sc[j])[:k2]
    return [(union[j][1], union[j][2]) for j in kept]


# -- random scenes -----------------------------------------------------------------

def random_view_props(rng, n_per_view, n_views=6, tie_scores=True):
    out = []
    for v in range(n_views):
        yaw = 2 * np.pi * v / n_views
        props = []
        bases = [(rng.uniform(4, 20), yaw + rng.uniform(-0.6, 0.6)) for _ in range(max(1, n_per_view // 4))]
        for _ in range(n_per_view):
            r, a = bases[rng.integers(len(bases))]
            r, a = r + rng.normal(0, 0.5), a + rng.normal(0, 0.05)
            b = Box3D(center=[r * np.cos(a), r * np.sin(a), 0.75], size=rng.uniform([3, 1.5, 1.2], [5, 2.2, 1.8]),
                      yaw=rng.uniform(-np.pi, np.pi))
            s = float(np.round(rng.random(), 1)) if tie_scores else float(rng.random())
            props.append((b, s))
        out.append(props)
    return out


def to_keys(ps):
    return [(p.view, p.index) for p in ps.proposals]


# -- per-view NMS --------------------------------------------------------------------

def test_single_proposal_survives():
    assert nms_pers([(0, 0, 10, 10)], [0.3]) == [0]


def test_identical_boxes_keep_best():
    assert nms_pers([(0, 0, 10, 10), (0, 0, 10, 10)], [0.8, 0.9]) == [1]


def test_nms_pers_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = 50
        xy = rng.uniform(0, 100, size=(n, 2))
        wh = rng.uniform(5, 30, size=(n, 2))
        rects = np.concatenate([xy, xy + wh], axis=1)
        rects[rng.random(n) < 0.3] = rects[0] + rng.normal(0, 1, 4)  # force near duplicates
        scores = np.round(rng.random(n), 2)
        got = nms_pers(rects, scores)
        want = brute_nms(n, scores, lambda a, b: iou_2d(rects[a], rects[b]), 0.75)
        assert got == want
        kept = rects[got]
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert iou_2d(kept[i], kept[j]) <= 0.75


# -- top-k1 --------------------------------------------------------------------------

def props_for(view, scores):
    return [Proposal(Box3D(center=[0, 0, 0], size=[1, 1, 1]), float(s), view, i) for i, s in enumerate(scores)]


def test_topk1_plain_union_when_small():
    per_view = [props_for(0, [0.5, 0.2]), props_for(1, [0.9])]
    out = gather_topk1(per_view, k1=5)
    assert [(p.view, p.index) for p in out] == [(1, 0), (0, 0), (0, 1)]


def test_topk1_truncates_large_view():
    scores = np.linspace(1, 0, K1 + 5, endpoint=False)
    out = gather_topk1([props_for(0, scores)], K1)
    assert len(out) == K1 and [p.index for p in out] == list(range(K1))


def test_topk1_ties_deterministic_under_permutation():
    rng = np.random.default_rng(1)
    per_view = [props_for(v, np.round(rng.random(12), 1)) for v in range(3)]
    ref = [(p.view, p.index) for p in gather_topk1(per_view, 5)]
    for _ in range(20):
        shuffled = [list(rng.permutation(np.array(ps, dtype=object))) for ps in per_view]
        order = rng.permutation(3)
        out = gather_topk1([shuffled[i] for i in order], 5)
        assert sorted((p.view, p.index) for p in out) == sorted(ref)
        assert [(p.view, p.index) for p in out] == ref


# -- BEV stage -------------------------------------------------------------------------

def test_same_object_from_two_views_collapses():
    b = Box3D(center=[10.0, 5.0, 0.8], size=[4, 1.8, 1.5], yaw=0.3)
    b2 = b.replace(center=[10.2, 5.1, 0.8])
    assert iou_bev(b, b2) > 0.3
    out = nms_bev_then_topk2([Proposal(b, 0.8, 0, 0), Proposal(b2, 0.7, 1, 0)])
    assert len(out) == 1 and out.proposals[0].view == 0


def test_disjoint_small_set_passes_through():
    props = [Proposal(Box3D(center=[5.0 * i, 0, 0], size=[2, 2, 2]), 1 - 0.1 * i, i % 6, i) for i in range(5)]
    out = nms_bev_then_topk2(props)
    assert to_keys(out) == [(p.view, p.index) for p in props]
    np.testing.assert_allclose(out.bev_centers, [[5.0 * i, 0] for i in range(5)])


def test_nms_bev_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(50):
        boxes = [b for props in random_view_props(rng, 8, n_views=2) for b, _ in props]
        scores = rng.random(len(boxes))
        got = nms_bev(boxes, scores)
        assert got == brute_nms(len(boxes), scores, lambda a, b: iou_bev(boxes[a], boxes[b]), 0.3)


# -- whole pipeline ------------------------------------------------------------------

def test_pipeline_matches_brute_force_oracle():
    rng = np.random.default_rng(3)
    for trial in range(200):
        props = random_view_props(rng, int(rng.integers(1, 10)))
        k1, k2 = int(rng.integers(1, 6)), int(rng.integers(1, 20))
        got = run_pipeline(props, RIG, PipelineConfig(k1=k1, k2=k2))
        assert to_keys(got) == brute_pipeline(props, RIG, k1, k2)


def test_pipeline_300_boxes():
    rng = np.random.default_rng(4)
    props = random_view_props(rng, 50)
    got = run_pipeline(props, RIG)
    assert to_keys(got) == brute_pipeline(props, RIG, K1, K2)


def test_pipeline_invariants_and_idempotence():
    rng = np.random.default_rng(5)
    for _ in range(10):
        props = random_view_props(rng, 30, tie_scores=False)
        out = run_pipeline(props, RIG, PipelineConfig(k2=25))
        assert len(out) <= 25
        assert list(out.scores) == sorted(out.scores, reverse=True)
        all_scores = {s for p in props for _, s in p}
        assert set(out.scores) <= all_scores
        boxes = [p.box for p in out.proposals]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert iou_bev(boxes[i], boxes[j]) <= 0.3
        # feed the survivors back, grouped by their source view
        again_in = [[(p.box, p.score) for p in out.proposals if p.view == v] for v in range(6)]
        again = run_pipeline(again_in, RIG, PipelineConfig(k2=25))
        assert [(p.view, p.score) for p in again.proposals] == [(p.view, p.score) for p in out.proposals]


def test_raising_survivor_score_keeps_it():
    rng = np.random.default_rng(6)
    for _ in range(20):
        props = random_view_props(rng, 20, tie_scores=False)
        out = run_pipeline(props, RIG, PipelineConfig(k1=8, k2=15))
        target = out.proposals[int(rng.integers(len(out)))]
        boosted = [list(p) for p in props]
        b, s = boosted[target.view][target.index]
        boosted[target.view][target.index] = (b, min(1.0, s + rng.uniform(0, 0.5)))
        again = run_pipeline(boosted, RIG, PipelineConfig(k1=8, k2=15))
        assert (target.view, target.index) in to_keys(again)


def test_empty_input():
    out = run_pipeline([[] for _ in range(6)], RIG)
    assert len(out) == 0 and out.bev_centers.shape == (0, 2)


def test_debug_dump(tmp_path):
    rng = np.random.default_rng(7)
    props = random_view_props(rng, 6)
    out, trace = run_pipeline(props, RIG, trace=True)
    trace.dump(tmp_path / "proposals.json")
    rec = json.loads((tmp_path / "proposals.json").read_text())
    assert len(rec) == sum(len(p) for p in props)
    assert sum(r["survived"]["bev_nms_topk2"] for r in rec) == len(out)
    for r in rec:
        assert not r["survived"]["topk1"] or r["survived"]["pers_nms"]


def test_reference_constants():
    cfg = PipelineConfig()
    assert (cfg.pers_nms_iou, cfg.bev_nms_iou, cfg.k1, cfg.k2) == (0.75, 0.3, 100, 100)
