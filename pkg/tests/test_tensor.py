import math

import numpy as np
import pytest

from refseg import tensor as tz
from refseg.tensor import (
    GradReport,
    ShapeError,
    Tensor,
    backward,
    bilinear_upsample,
    grad_check,
    grouped_linear,
    layer_norm,
    matmul,
    softmax_last,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    a = rng().normal(size=(3, 3))
    out = matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_zero():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    z = Tensor(np.zeros((2, 2)))
    np.testing.assert_array_equal(matmul(a, z).data, np.zeros((2, 2)))


def test_matmul_vs_triple_loop():
    a = rng(1).normal(size=(4, 5))
    b = rng(2).normal(size=(5, 3))
    got = matmul(Tensor(a), Tensor(b)).data
    want = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            acc = 0.0
            for k in range(5):
                acc += a[i, k] * b[k, j]
            want[i, j] = acc
    assert np.max(np.abs(got - want)) <= 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError) as exc:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_batch_broadcast():
    a = rng(3).normal(size=(5, 2, 3))
    b = rng(4).normal(size=(3, 4))
    got = matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, a @ b)


# -- softmax -----------------------------------------------------------------

def test_softmax_symmetry():
    out = softmax_last(Tensor([1.0, 1.0, 1.0])).data
    np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)


def test_softmax_closed_form():
    out = softmax_last(Tensor([0.0, math.log(2.0)])).data
    np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_stabilized():
    out = softmax_last(Tensor([1000.0, 1001.0])).data
    e = math.e
    np.testing.assert_allclose(out, [1 / (1 + e), e / (1 + e)], atol=1e-15)
    assert np.all(np.isfinite(out))


def test_softmax_rows_sum_to_one_property():
    g = rng(7)
    for _ in range(25):
        shape = tuple(g.integers(1, 5, size=g.integers(1, 4))) + (int(g.integers(1, 9)),)
        x = g.normal(scale=50.0, size=shape)
        s = softmax_last(Tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(shape[:-1]), atol=1e-9)


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_slice():
    out = layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.zeros(3))


def test_layer_norm_two_point():
    out = layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert out[0] < 0 < out[1]
    assert np.all(np.abs(out) <= 1.0)
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-4)


def test_layer_norm_statistics():
    x = rng(5).normal(size=(6, 32))
    out = layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    assert np.max(np.abs(out.mean(axis=-1))) <= 1e-9
    assert np.max(np.abs(out.var(axis=-1) - 1.0)) <= 1e-4


# -- bilinear upsample ---------------------------------------------------------

def test_bilinear_constant_preserved_exactly():
    x = np.full((2, 2, 3), 5.0)
    out = bilinear_upsample(Tensor(x), 4, 4).data
    np.testing.assert_array_equal(out, np.full((4, 4, 3), 5.0))


def test_bilinear_identity_exact():
    x = rng(6).normal(size=(3, 5, 2))
    out = bilinear_upsample(Tensor(x), 3, 5).data
    np.testing.assert_array_equal(out, x)


def test_bilinear_row_matches_closed_form():
    # Oracle: per output pixel, src = (j + 0.5) * w_in / w_out - 0.5 clamped,
    # then linear interpolation between floor/ceil neighbours.
    x = np.array([[0.0], [1.0]]).reshape(1, 2, 1)
    out = bilinear_upsample(Tensor(x), 1, 4).data.reshape(-1)
    want = []
    for j in range(4):
        s = (j + 0.5) * 2 / 4 - 0.5
        s = min(max(s, 0.0), 1.0)
        j0 = math.floor(s)
        j1 = min(j0 + 1, 1)
        w = s - j0
        want.append((1 - w) * x[0, j0, 0] + w * x[0, j1, 0])
    np.testing.assert_allclose(out, want, atol=1e-15)


def test_bilinear_rejects_shrinking():
    with pytest.raises(ShapeError):
        bilinear_upsample(Tensor(np.zeros((4, 4, 1))), 2, 4)


# -- grouped linear -------------------------------------------------------------

def test_grouped_linear_identity_blocks():
    x = rng(8).normal(size=(5, 6))
    w = np.stack([np.eye(3), np.eye(3)])
    out = grouped_linear(Tensor(x), Tensor(w), 2).data
    np.testing.assert_array_equal(out, x)


def test_grouped_linear_group_isolation_bitwise():
    g = rng(9)
    x = g.normal(size=(4, 8))
    w = g.normal(size=(2, 4, 4))
    base = grouped_linear(Tensor(x), Tensor(w), 2).data
    x2 = x.copy()
    x2[:, :4] += g.normal(size=(4, 4))  # perturb group 0 only
    out2 = grouped_linear(Tensor(x2), Tensor(w), 2).data
    np.testing.assert_array_equal(out2[:, 4:], base[:, 4:])


def test_grouped_linear_single_group_is_dense_matmul():
    g = rng(10)
    x = g.normal(size=(7, 5))
    w = g.normal(size=(1, 5, 4))
    got = grouped_linear(Tensor(x), Tensor(w), 1).data
    want = matmul(Tensor(x), Tensor(w[0])).data
    assert np.max(np.abs(got - want)) <= 1e-12


def test_grouped_linear_rejects_indivisible():
    with pytest.raises(ShapeError):
        grouped_linear(Tensor(np.zeros((2, 7))), Tensor(np.zeros((2, 3, 3))), 2)


# -- elementwise -----------------------------------------------------------------

def test_sigmoid_relu_mul_basics():
    assert tz.sigmoid(Tensor(0.0)).data == 0.5
    assert tz.relu(Tensor(-3.0)).data == 0.0
    x = rng(11).normal(size=(3, 3))
    np.testing.assert_array_equal((Tensor(x) * Tensor(np.ones((3, 3)))).data, x)
    s = tz.sigmoid(Tensor(rng(12).normal(scale=10, size=100))).data
    assert np.all((s > 0) & (s < 1))


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) * Tensor(np.zeros((4,)))


# -- backward -----------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(rng(13).normal(size=(4, 5)), requires_grad=True)
    backward(tz.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((4, 5)))


def test_backward_square_gives_two_x():
    x = Tensor(rng(14).normal(size=(6,)), requires_grad=True)
    backward(tz.tensor_sum(x * x))
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)


def test_backward_rejects_non_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x + 1.0)


def test_backward_accumulates():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(tz.tensor_sum(x))
    backward(tz.tensor_sum(x * 2.0))
    np.testing.assert_array_equal(x.grad, np.full(3, 3.0))


def test_composite_graph_vs_finite_differences():
    g = rng(15)
    a = Tensor(g.normal(size=(3, 4)))
    b = Tensor(g.normal(size=(4, 2)))

    def f(a_, b_):
        return tz.tensor_sum(softmax_last(matmul(a_, b_)) * Tensor(g2))

    g2 = rng(16).normal(size=(3, 2))
    rep = grad_check(f, [a, b], name="softmax@matmul")
    assert rep.max_rel_error <= 1e-4


# -- grad_check harness -----------------------------------------------------------

def test_grad_check_linear_is_exact():
    x = Tensor(rng(17).normal(size=(5,)))
    w = rng(18).normal(size=(5,))
    rep = grad_check(lambda t: tz.tensor_sum(t * Tensor(w)), [x], name="linear")
    assert rep.max_rel_error <= 1e-10


def test_grad_check_reports_fields():
    x = Tensor(rng(19).normal(size=(3,)))
    rep = grad_check(lambda t: tz.tensor_sum(t * t), [x], name="square")
    assert isinstance(rep, GradReport)
    assert rep.op == "square"
    assert len(rep.per_param) == 1


def _weighted_sum(out, w):
    """Scalarise a tensor with a fixed random projection so FD sees every entry."""
    return tz.tensor_sum(out * Tensor(w))


def _make_matmul(g):
    w = g.normal(size=(3, 4))
    return (lambda a, b: _weighted_sum(matmul(a, b), w),
            [Tensor(g.normal(size=(3, 5))), Tensor(g.normal(size=(5, 4)))])


def _make_softmax(g):
    w = g.normal(size=(4, 6))
    return (lambda x: _weighted_sum(softmax_last(x), w),
            [Tensor(g.normal(size=(4, 6)))])


def _make_layer_norm(g):
    w = g.normal(size=(3, 8))
    return (lambda x, gn, bs: _weighted_sum(layer_norm(x, gn, bs), w),
            [Tensor(g.normal(size=(3, 8))), Tensor(g.normal(size=(8,))),
             Tensor(g.normal(size=(8,)))])


def _make_bilinear(g):
    w = g.normal(size=(5, 7, 2))
    return (lambda x: _weighted_sum(bilinear_upsample(x, 5, 7), w),
            [Tensor(g.normal(size=(3, 4, 2)))])


def _make_grouped(g):
    w = g.normal(size=(4, 6))
    return (lambda x, wg: _weighted_sum(grouped_linear(x, wg, 3), w),
            [Tensor(g.normal(size=(4, 6))), Tensor(g.normal(size=(3, 2, 2)))])


def _make_sigmoid(g):
    w = g.normal(size=(10,))
    return (lambda x: _weighted_sum(tz.sigmoid(x), w), [Tensor(g.normal(size=(10,)))])


def _make_relu(g):
    # keep inputs away from the kink so central differences are valid
    w = g.normal(size=(10,))
    x = g.normal(size=(10,))
    x = np.where(np.abs(x) < 1e-3, 0.1, x)
    return (lambda t: _weighted_sum(tz.relu(t), w), [Tensor(x)])


GRADCHECK_OPS = [
    ("matmul", _make_matmul),
    ("softmax_last", _make_softmax),
    ("layer_norm", _make_layer_norm),
    ("bilinear_upsample", _make_bilinear),
    ("grouped_linear", _make_grouped),
    ("sigmoid", _make_sigmoid),
    ("relu", _make_relu),
]


@pytest.mark.parametrize("name,make", GRADCHECK_OPS, ids=[n for n, _ in GRADCHECK_OPS])
def test_gradcheck_ops_ten_seeds(name, make):
    worst = 0.0
    for seed in range(10):
        fn, params = make(rng(100 + seed))
        rep = grad_check(fn, params, name=name)
        worst = max(worst, rep.max_rel_error)
    assert worst <= 1e-4, f"{name}: {worst}"


def test_ops_deterministic():
    g = rng(20)
    a, b = g.normal(size=(6, 6)), g.normal(size=(6, 6))
    r1 = softmax_last(matmul(Tensor(a), Tensor(b))).data
    r2 = softmax_last(matmul(Tensor(a), Tensor(b))).data
    np.testing.assert_array_equal(r1, r2)
