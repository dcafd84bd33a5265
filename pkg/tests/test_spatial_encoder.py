import numpy as np
import pytest

from twostage_bev.autodiff import DiffTensor
from twostage_bev.autodiff.gradcheck import check_directional
from twostage_bev.backbone import STRIDES, Backbone, FeaturePyramid
from twostage_bev.geometry import default_rig, project, se3_apply
from twostage_bev.spatial_encoder import (BEVGridSpec, BEVSelfAttention, EncoderLayer,
                                          SpatialCrossAttention, encoder_stack,
                                          project_reference_points, reference_points,
                                          spatial_cross_attention)

C = 6
SPEC = BEVGridSpec(x_range=(-12.0, 12.0), y_range=(-12.0, 12.0), H=8, W=8, z_anchors=(0.0, 1.5))


def random_pyramid(rng, n_views, size=128, channels=C):
    return FeaturePyramid(STRIDES, [DiffTensor(rng.normal(size=(n_views, channels, size // s, size // s)))
                                    for s in STRIDES])


def identity_sca(rng, n_levels=4, n_points=2):
    sca = SpatialCrossAttention(rng, C, n_levels, n_points)
    sca.offsets.bias.data[:] = 0.0
    for lin in (sca.value, sca.out):
        lin.weight.data[:] = np.eye(C)
        lin.bias.data[:] = 0.0
    return sca


def test_reference_points_small_grid():
    spec = BEVGridSpec(x_range=(-1, 1), y_range=(-1, 1), H=2, W=2, z_anchors=(0.0,))
    pts = reference_points(spec)
    assert pts.shape == (4, 3)
    assert {tuple(p) for p in pts} == {(-0.5, -0.5, 0.0), (0.5, -0.5, 0.0), (-0.5, 0.5, 0.0), (0.5, 0.5, 0.0)}


def test_reference_point_count_and_inverse_map():
    spec = BEVGridSpec(x_range=(-10, 14), y_range=(-3, 9), H=6, W=12, z_anchors=(-1.0, 0.0, 2.0))
    pts = reference_points(spec)
    assert len(pts) == spec.H * spec.W * 3
    rows, cols = spec.cell_index(pts[:, :2])
    cell = np.arange(len(pts)) // 3
    np.testing.assert_array_equal(rows * spec.W + cols, cell)
    np.testing.assert_allclose(spec.denormalize(spec.normalize(pts[:, :2])), pts[:, :2], atol=1e-12)


def test_invalid_spec():
    with pytest.raises(ValueError):
        BEVGridSpec(z_anchors=())


def test_all_points_behind_camera_keep_queries():
    rng = np.random.default_rng(0)
    rig = default_rig(num_views=1)  # looks along +x
    spec = BEVGridSpec(x_range=(-30, -10), y_range=(-5, 5), H=4, W=4, z_anchors=(0.0,))
    assert len(project_reference_points(spec, rig)) == 0
    q = rng.normal(size=(C, 4, 4))
    out = spatial_cross_attention(SpatialCrossAttention(rng, C), q, random_pyramid(rng, 1), rig, spec)
    assert np.array_equal(out.features.data, q)


def bilinear_np(img, x, y):
    Cc, H, W = img.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    out = np.zeros(Cc)
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < H and 0 <= xx < W:
                out += wy * wx * img[:, yy, xx]
    return out


def test_cell_by_cell_projection_oracle():
    rng = np.random.default_rng(1)
    rig = default_rig(num_views=1)
    spec = BEVGridSpec(x_range=(2, 26), y_range=(-12, 12), H=6, W=6, z_anchors=(0.5,))
    pyr = random_pyramid(rng, 1)
    q = rng.normal(size=(C, 6, 6))
    out = spatial_cross_attention(identity_sca(rng), q, pyr, rig, spec).features.data
    K, T = rig.view(0)
    centers = reference_points(spec)
    hit = 0
    for cell, p in enumerate(centers):
        i, j = divmod(cell, spec.W)
        u, v, ok = project(se3_apply(T, p), K)
        if not ok:
            np.testing.assert_array_equal(out[:, i, j], q[:, i, j])
            continue
        hit += 1
        expect = np.mean([bilinear_np(pyr.levels[lvl].data[0], (u - (s - 1) / 2) / s, (v - (s - 1) / 2) / s)
                          for lvl, s in enumerate(STRIDES[:4])], axis=0)
        np.testing.assert_allclose(out[:, i, j], q[:, i, j] + expect, atol=1e-12)
    assert hit > 5


def test_softmax_shift_invariance():
    rng = np.random.default_rng(2)
    rig = default_rig(num_views=3)
    pyr = random_pyramid(rng, 3)
    sca = SpatialCrossAttention(rng, C, 4, 2)
    sca.attn.weight.data[:] = rng.normal(size=sca.attn.weight.shape)
    q = rng.normal(size=(C, SPEC.H, SPEC.W))
    a = spatial_cross_attention(sca, q, pyr, rig, SPEC).features.data
    sca.attn.bias.data += 3.7
    b = spatial_cross_attention(sca, q, pyr, rig, SPEC).features.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_invalid_view_contributes_nothing():
    rng = np.random.default_rng(3)
    rig = default_rig(num_views=6)
    pyr = random_pyramid(rng, 6)
    sca = SpatialCrossAttention(rng, C, 4, 2)
    q = rng.normal(size=(C, SPEC.H, SPEC.W))
    hits = project_reference_points(SPEC, rig)
    base = spatial_cross_attention(sca, q, pyr, rig, SPEC).features.data
    for v in range(6):
        levels = [DiffTensor(t.data.copy()) for t in pyr.levels]
        for t in levels:
            t.data[v] = 0.0
        out = spatial_cross_attention(sca, q, FeaturePyramid(STRIDES, levels), rig, SPEC).features.data
        untouched = np.setdiff1d(np.arange(SPEC.num_cells), hits.cell[hits.view == v])
        i, j = np.divmod(untouched, SPEC.W)
        np.testing.assert_array_equal(out[:, i, j], base[:, i, j])
        assert not np.allclose(out, base)


def test_view_permutation_equivariance():
    rng = np.random.default_rng(4)
    rig = default_rig(num_views=6)
    pyr = random_pyramid(rng, 6)
    layers = [EncoderLayer(rng, C, n_points=2)]
    q = rng.normal(size=(C, SPEC.H, SPEC.W))
    perm = [3, 0, 5, 1, 4, 2]
    a = encoder_stack(layers, q, pyr, rig, SPEC).features.data
    ppyr = FeaturePyramid(STRIDES, [DiffTensor(t.data[perm]) for t in pyr.levels])
    b = encoder_stack(layers, q, ppyr, rig.permuted(perm), SPEC).features.data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_encoder_stack_shapes_and_empty():
    rng = np.random.default_rng(5)
    rig = default_rig(num_views=2)
    pyr = random_pyramid(rng, 2)
    q = rng.normal(size=(C, SPEC.H, SPEC.W))
    assert np.array_equal(encoder_stack([], q, pyr, rig, SPEC).features.data, q)
    for n in (1, 2):
        layers = [EncoderLayer(rng, C, n_points=2) for _ in range(n)]
        assert encoder_stack(layers, q, pyr, rig, SPEC).features.shape == (C, SPEC.H, SPEC.W)
    with pytest.raises(ValueError):
        encoder_stack(layers, q, pyr, default_rig(num_views=3), SPEC)


def test_gradient_reaches_backbone():
    rng = np.random.default_rng(6)
    rig = default_rig(num_views=2)
    bb = Backbone(rng, 8, 1, C)
    images = rng.random((2, 3, 128, 128))
    grid = encoder_stack([EncoderLayer(rng, C, n_points=2)], rng.normal(size=(C, SPEC.H, SPEC.W)),
                         bb(images), rig, SPEC)
    (grid.features * grid.features).sum().backward()
    assert np.abs(bb.stem[0].weight.grad).sum() > 0


def _randomized(module, rng):
    for p in module.parameters():
        p.data = p.data + 0.3 * rng.normal(size=p.shape)
    return module


@pytest.mark.parametrize("seed", range(3))
def test_cross_attention_gradient(seed):
    rng = np.random.default_rng(100 + seed)
    rig = default_rig(num_views=2)
    pyr = random_pyramid(rng, 2, channels=C)
    sca = _randomized(SpatialCrossAttention(rng, C, 4, 2), rng)
    hits = project_reference_points(SPEC, rig)
    q = DiffTensor(rng.normal(size=(SPEC.num_cells, C)), requires_grad=True)
    for t in pyr.levels:
        t.requires_grad = True
    w = rng.normal(size=(SPEC.num_cells, C))
    params = [q, *pyr.levels, *sca.parameters()]
    assert check_directional(lambda *_: (sca(q, pyr, hits) * w).sum(), params, seed=seed) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_bev_self_attention_gradient(seed):
    rng = np.random.default_rng(200 + seed)
    attn = _randomized(BEVSelfAttention(rng, C, 3), rng)
    q = DiffTensor(rng.normal(size=(SPEC.num_cells, C)), requires_grad=True)
    w = rng.normal(size=(SPEC.num_cells, C))
    params = [q, *attn.parameters()]
    assert check_directional(lambda *_: (attn(q, SPEC) * w).sum(), params, seed=seed) < 1e-4
