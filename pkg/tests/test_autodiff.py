import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostage_bev.autodiff import (AdamWHyper, AdamWState, DiffTensor, DimensionError, Tape,
                                   load_tensors, ops, optimizer_step, save_tensors)
from twostage_bev.autodiff.gradcheck import check_gradients, numeric_grad
from twostage_bev.autodiff.optim import NonFiniteGradientError


def T(x, grad=True):
    return DiffTensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_add_and_sigmoid_values():
    np.testing.assert_array_equal(ops.elementwise("add", T([1, 2]), T([3, 4])).data, [4, 6])
    assert ops.elementwise("sigmoid", T(0.0)).item() == 0.5


def test_x_exp_x_derivative_matches_central_difference():
    x = T(1.0)
    y = x * x.exp()
    y.backward()
    step = 1e-5
    f = lambda v: v * np.exp(v)
    fd = (f(1 + step) - f(1 - step)) / (2 * step)
    assert abs(x.grad - fd) / abs(fd) < 1e-6
    assert abs(x.grad - 2 * np.e) < 1e-12


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2,\).*\(3,\)"):
        ops.add(T([1, 2]), T([1, 2, 3]))


def test_matmul_values():
    M = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(ops.matmul(T(np.eye(3)), T(M)).data, M)
    out = ops.matmul(T([[1, 2], [3, 4]]), T([[5], [6]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])
    with pytest.raises(DimensionError):
        ops.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a, b = T(rng.normal(size=(4, 5))), T(rng.normal(size=(5, 3)))
    assert check_gradients(ops.matmul, [a, b]) < 1e-5


def test_softmax_values():
    np.testing.assert_allclose(ops.softmax(T(np.zeros(4))).data, [0.25] * 4)
    s = ops.softmax(T([1000.0, 0.0])).data
    assert np.all(np.isfinite(s))
    assert s[0] == pytest.approx(1.0) and s[1] == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(IndexError):
        ops.softmax(T(np.zeros(3)), axis=2)


def test_softmax_gradient():
    rng = np.random.default_rng(1)
    x = T(rng.normal(size=6))
    w = rng.normal(size=6)
    assert check_gradients(lambda v: ops.softmax(v), [x], weights=w) < 1e-5


def test_bilinear_integer_location_and_padding():
    rng = np.random.default_rng(2)
    f = T(rng.normal(size=(3, 5, 7)), grad=False)
    # points are (x, y) = (column, row)
    out = ops.bilinear_sample(f, T([[4.0, 2.0]], grad=False))
    np.testing.assert_array_equal(out.data[:, 0], f.data[:, 2, 4])
    zero = ops.bilinear_sample(f, T([[-5.0, -5.0]], grad=False), "zeros")
    np.testing.assert_array_equal(zero.data, 0.0)
    border = ops.bilinear_sample(f, T([[-5.0, -5.0]], grad=False), "border")
    np.testing.assert_array_equal(border.data[:, 0], f.data[:, 0, 0])


def test_bilinear_point_gradient_interior():
    rng = np.random.default_rng(3)
    f = T(rng.normal(size=(2, 6, 6)))
    p = T([[2.3, 3.6], [1.7, 0.4]])
    assert check_gradients(lambda a, b: ops.bilinear_sample(a, b), [f, p]) < 1e-4


def test_concat_and_conv_identity():
    out = ops.concat([T(np.ones((2, 3))), T(np.zeros((2, 3)))], axis=0)
    assert out.shape == (4, 3)
    rng = np.random.default_rng(4)
    x = T(rng.normal(size=(3, 5, 5)))
    k = np.zeros((3, 3, 1, 1))
    k[[0, 1, 2], [0, 1, 2]] = 1.0
    np.testing.assert_array_equal(ops.conv2d(x, T(k), stride=1, pad=0).data, x.data)


def test_conv_gradient():
    rng = np.random.default_rng(5)
    x = T(rng.normal(size=(1, 4, 4)))
    k = T(rng.normal(size=(2, 1, 3, 3)))
    b = T(rng.normal(size=2))
    assert check_gradients(lambda a, w, c: ops.conv2d(a, w, c, stride=1, pad=1), [x, k, b]) < 1e-5
    assert check_gradients(lambda a, w, c: ops.conv2d(a, w, c, stride=2, pad=1), [x, k, b]) < 1e-5


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 6, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(T(x, False), T(k, False), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                ref[o, i, j] = (xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("kind", ["exp", "log", "sigmoid", "tanh", "neg", "relu"])
def test_unary_gradients(kind):
    rng = np.random.default_rng(7)
    x = T(rng.uniform(0.3, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)))
    if kind == "log":
        x.data = np.abs(x.data)
    assert check_gradients(lambda v: ops.elementwise(kind, v), [x]) < 1e-5


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "pow"])
def test_binary_gradients_with_broadcast(kind):
    rng = np.random.default_rng(8)
    a = T(rng.uniform(0.5, 2.0, size=(3, 4)))
    b = T(rng.uniform(0.5, 2.0, size=(4,)))
    assert check_gradients(lambda x, y: ops.elementwise(kind, x, y), [a, b]) < 1e-5


def test_optimizer_zero_grad_no_decay_is_noop():
    p = T([1.0, -2.0])
    state = optimizer_step([p], [np.zeros(2)], AdamWState(), AdamWHyper(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_optimizer_first_step_magnitude_is_lr():
    p = T([0.0])
    optimizer_step([p], [np.ones(1)], AdamWState(), AdamWHyper(lr=0.1, weight_decay=0.0))
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p.data[0] == pytest.approx(-0.1, rel=1e-6)


def test_optimizer_decoupled_decay():
    p = T([2.0])
    optimizer_step([p], [np.zeros(1)], AdamWState(), AdamWHyper(lr=0.1, weight_decay=0.01))
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), rel=1e-14)


def test_optimizer_nan_aborts():
    p = T([0.0])
    with pytest.raises(NonFiniteGradientError, match="w0"):
        optimizer_step([p], [np.array([np.nan])], AdamWState(), AdamWHyper(), names=["w0"])


def test_tape_is_topological_and_grad_shapes():
    rng = np.random.default_rng(9)
    x = T(rng.normal(size=(3, 4)))
    y = ops.softmax(x @ T(rng.normal(size=(4, 2))), axis=1)
    z = (ops.concat([y, x[:, :2]], axis=0).relu() * 2).sum()
    assert Tape(z).is_topological()
    z.backward()
    assert x.grad.shape == x.shape


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_composition_grad_shape_and_determinism(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 4, size=2))
    data = rng.normal(size=shape)
    outs = []
    for _ in range(2):
        x = T(data.copy())
        y = ((x.tanh() * x.sigmoid()).exp().sum(axis=0) + x.mean()).sum()
        y.backward()
        assert x.grad.shape == x.shape
        outs.append((y.data.copy(), x.grad.copy()))
    assert outs[0][0].tobytes() == outs[1][0].tobytes()
    assert outs[0][1].tobytes() == outs[1][1].tobytes()


def test_segment_sum_and_take_rows_gradients():
    rng = np.random.default_rng(10)
    v = T(rng.normal(size=(6, 2)))
    ids = np.array([0, 2, 2, 1, 0, 2])
    assert check_gradients(lambda a: ops.segment_sum(a, ids, 4), [v], weights=rng.normal(size=(4, 2))) < 1e-6
    rows = np.array([1, 1, 5, 0])
    assert check_gradients(lambda a: ops.take_rows(a, rows), [v], weights=rng.normal(size=(4, 2))) < 1e-6


def test_numeric_grad_helper_on_quadratic():
    x = T([1.0, 2.0])
    g = numeric_grad(lambda v: (v * v).sum(), [x], 0)
    np.testing.assert_allclose(g, [2.0, 4.0], rtol=1e-8)


def test_checkpoint_roundtrip_and_truncation(tmp_path):
    tensors = {"a.weight": np.arange(6.0).reshape(2, 3), "b": np.array(3.5)}
    path = tmp_path / "ck.bin"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert set(back) == set(tensors)
    np.testing.assert_array_equal(back["a.weight"], tensors["a.weight"])
    assert (tmp_path / "ck.bin.json").exists()
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="byte offset"):
        load_tensors(path)


def test_float32_runtime_option():
    from twostage_bev.autodiff import using_dtype
    with using_dtype(np.float32):
        x = DiffTensor([1.0, 2.0], requires_grad=True)
        y = (x * x).sum()
        y.backward()
    assert x.dtype == np.float32 and x.grad.dtype == np.float32
