import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionformer import tensor as tn
from fusionformer.tensor import ShapeError, Tensor


def rand(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity(rng):
    m = rng.normal(size=(2, 2))
    out = tn.matmul(Tensor(np.eye(2)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_matmul_hand_values():
    out = tn.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_gradient(rng):
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    assert tn.finite_diff_check(lambda: tn.sum(tn.matmul(a, b)), [a, b], h=1e-5) < 1e-7


def test_matmul_batched_broadcast_gradient(rng):
    a, b = rand(rng, 2, 3, 4), rand(rng, 4, 2)
    assert tn.finite_diff_check(lambda: tn.sum(tn.gelu(a @ b)), [a, b]) < 1e-5


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    out = tn.softmax(Tensor([[2.5, 2.5, 2.5]]), axis=-1)
    assert np.allclose(out.data, 1 / 3, atol=1e-15)


def test_softmax_log2():
    out = tn.softmax(Tensor([0.0, math.log(2.0)]), axis=0)
    assert np.allclose(out.data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_large_inputs_stay_finite():
    out = tn.softmax(Tensor([1000.0, 1001.0]), axis=0)
    # oracle: the shifted inputs [-1, 0]
    lo = math.exp(-1.0) / (math.exp(-1.0) + 1.0)
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(lo, abs=1e-15)
    assert out.data[1] == pytest.approx(1 - lo, abs=1e-15)
    assert lo == pytest.approx(0.2689, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6))
def test_softmax_rows_sum_to_one(seed, n, m):
    x = np.random.default_rng(seed).uniform(-1e4, 1e4, size=(n, m))
    out = tn.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(axis=-1) - 1)) < 1e-12


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        tn.softmax(Tensor(np.ones((2, 2))), axis=2)


# -- layer norm --------------------------------------------------------------

def test_layer_norm_constant_vector():
    out = tn.layer_norm(Tensor(np.full(5, 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.array_equal(out.data, np.zeros(5))


def test_layer_norm_population_variance():
    out = tn.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    assert out.data.tolist() == [-1.0, 1.0]


def test_layer_norm_gradient(rng):
    x, g, b = rand(rng, 4, 8), rand(rng, 8), rand(rng, 8)
    w = Tensor(rng.normal(size=(4, 8)))
    assert tn.finite_diff_check(lambda: tn.sum(tn.layer_norm(x, g, b) * w), [x, g, b]) < 1e-6


def test_layer_norm_affine_shape_checked():
    with pytest.raises(ShapeError):
        tn.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


# -- permute / reshape / concat ----------------------------------------------

def test_permute_involution(rng):
    x = Tensor(rng.normal(size=(3, 4, 5)))
    back = tn.permute(tn.permute(x, (1, 0, 2)), (1, 0, 2))
    assert np.array_equal(back.data, x.data)


def test_permute_shape_and_index_sweep(rng):
    x = Tensor(rng.normal(size=(9, 17, 4)))
    y = tn.permute(x, (1, 0, 2))
    assert y.shape == (17, 9, 4)
    for t in range(9):
        for j in range(17):
            for d in range(4):
                assert y.data[j, t, d] == x.data[t, j, d]


def test_permute_rejects_non_permutation():
    with pytest.raises(ShapeError):
        tn.permute(Tensor(np.ones((2, 3))), (0, 0))


def test_permute_gradient(rng):
    x = rand(rng, 2, 3, 4)
    w = Tensor(rng.normal(size=(4, 2, 3)))
    assert tn.finite_diff_check(lambda: tn.sum(tn.permute(x, (2, 0, 1)) * w), x) < 1e-8


def test_concat_split_round_trip(rng):
    a, b = Tensor(rng.normal(size=(9, 3, 4))), Tensor(rng.normal(size=(9, 3, 4)))
    c = tn.concat([a, b], axis=0)
    assert c.shape == (18, 3, 4)
    pa, pb = tn.split(c, [9, 9], axis=0)
    assert np.array_equal(pa.data, a.data) and np.array_equal(pb.data, b.data)


def test_concat_gradient_routes_to_slices(rng):
    a, b = rand(rng, 2, 3), rand(rng, 4, 3)
    w = Tensor(rng.normal(size=(6, 3)))
    assert tn.finite_diff_check(lambda: tn.sum(tn.concat([a, b], 0) * w), [a, b]) < 1e-8
    a.zero_grad(), b.zero_grad()
    tn.backward(tn.sum(tn.concat([a, b], 0) * w))
    assert np.array_equal(a.grad, w.data[:2]) and np.array_equal(b.grad, w.data[2:])


def test_concat_extent_mismatch():
    with pytest.raises(ShapeError):
        tn.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)


# -- framewise conv ----------------------------------------------------------

def test_framewise_conv_selects_first_frames(rng):
    T, M = 3, 5
    x = Tensor(rng.normal(size=(2 * T, M)))
    w = Tensor(np.hstack([np.eye(T), np.zeros((T, T))]))
    out = tn.framewise_conv1d(x, w, Tensor(np.zeros(T)))
    assert np.array_equal(out.data, x.data[:T])


def test_framewise_conv_zero_weight_broadcasts_bias(rng):
    x = Tensor(rng.normal(size=(4, 6)))
    out = tn.framewise_conv1d(x, Tensor(np.zeros((2, 4))), Tensor([1.5, -2.0]))
    assert np.array_equal(out.data, np.array([[1.5] * 6, [-2.0] * 6]))


def test_framewise_conv_gradient(rng):
    x, w, b = rand(rng, 2, 6, 5), rand(rng, 3, 6), rand(rng, 3)
    v = Tensor(rng.normal(size=(2, 3, 5)))
    assert tn.finite_diff_check(lambda: tn.sum(tn.framewise_conv1d(x, w, b) * v), [x, w, b]) < 1e-8


def test_framewise_conv_shape_mismatch():
    with pytest.raises(ShapeError):
        tn.framewise_conv1d(Tensor(np.ones((5, 2))), Tensor(np.ones((2, 4))), Tensor(np.zeros(2)))


# -- elementwise suite -------------------------------------------------------

def test_gelu_zero_and_mean_of_constants():
    assert tn.gelu(Tensor([0.0])).data[0] == 0.0
    assert tn.mean(Tensor(np.full((3, 4), 2.5))).item() == 2.5


@pytest.mark.parametrize("op", ["add", "sub", "mul", "scale", "gelu", "mean", "sum", "sqrt",
                                "l2_norm_lastaxis", "div", "getitem"])
def test_elementwise_gradients(op, rng):
    a, b = rand(rng, 3, 4), rand(rng, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)))
    fns = {
        "add": (lambda: tn.sum((a + b) * w), [a, b]),
        "sub": (lambda: tn.sum((a - b) * w), [a, b]),
        "mul": (lambda: tn.sum(a * b * w), [a, b]),
        "scale": (lambda: tn.sum(tn.scale(a, -1.7) * w), [a]),
        "gelu": (lambda: tn.sum(tn.gelu(a) * w), [a]),
        "mean": (lambda: tn.sum(tn.mean(a * w, axis=0) * tn.mean(a, axis=0)), [a]),
        "sum": (lambda: tn.sum(tn.sum(a, axis=1, keepdims=True) * a), [a]),
        "sqrt": (lambda: tn.sum(tn.sqrt(pos) * w), [pos]),
        "l2_norm_lastaxis": (lambda: tn.sum(tn.l2_norm_lastaxis(a) * Tensor([1.0, -2.0, 0.5])), [a]),
        "div": (lambda: tn.sum(a / pos), [a, pos]),
        "getitem": (lambda: tn.sum(a[1:, ::2] * w[1:, ::2]), [a]),
    }
    f, xs = fns[op]
    assert tn.finite_diff_check(f, xs) < 1e-5


def test_broadcast_add_gradient(rng):
    a, b = rand(rng, 2, 3, 4), rand(rng, 4)
    w = Tensor(rng.normal(size=(2, 3, 4)))
    assert tn.finite_diff_check(lambda: tn.sum((a + b) * w), [a, b]) < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.integers(1, 6), min_size=2, max_size=3))
def test_random_shape_gradients(seed, shape):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    g, b = Tensor(rng.normal(size=shape[-1:]), requires_grad=True), Tensor(rng.normal(size=shape[-1:]), requires_grad=True)
    w = Tensor(rng.normal(size=shape))

    def f():
        h = tn.layer_norm(tn.gelu(x), g, b)
        return tn.sum(tn.softmax(h, axis=-1) * w) + tn.mean(tn.l2_norm_lastaxis(x))

    assert tn.finite_diff_check(f, [x, g, b]) < 1e-5


# -- backward ----------------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = rand(rng, 3, 2)
    tn.backward(tn.sum(x))
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    tn.backward(tn.sum(x * x))
    assert x.grad.tolist() == [6.0]


def test_backward_accumulates():
    x = Tensor([3.0], requires_grad=True)
    loss = tn.sum(x * x)
    tn.backward(loss)
    tn.backward(loss)
    assert x.grad.tolist() == [12.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        tn.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_shared_subexpression_visited_once():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    tn.backward(tn.sum(y + y))
    assert x.grad.tolist() == [8.0]


def test_grad_present_iff_requires_grad():
    assert Tensor([1.0]).grad is None
    t = Tensor(np.ones((2, 3)), requires_grad=True)
    assert t.grad.shape == (2, 3)


# -- finite difference oracle ------------------------------------------------

def test_finite_diff_quadratic_form(rng):
    A = rng.normal(size=(4, 4))
    A = Tensor(A + A.T)
    x = rand(rng, 4, 1)
    err = tn.finite_diff_check(lambda: tn.sum(tn.matmul(tn.permute(x, (1, 0)), tn.matmul(A, x))), x)
    assert err < 1e-9


def test_finite_diff_detects_nondeterminism(rng):
    x = rand(rng, 3)
    noise = np.random.default_rng(0)
    with pytest.raises(tn.NonDeterministicError):
        tn.finite_diff_check(lambda: tn.sum(x) + float(noise.normal()), x)


def test_fault_injection_is_detected(rng):
    x = rand(rng, 3, 3)
    with tn.inject_fault("gelu"):
        assert tn.finite_diff_check(lambda: tn.sum(tn.gelu(x)), x) > 1e-2
    assert tn.finite_diff_check(lambda: tn.sum(tn.gelu(x)), x) < 1e-6


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(4, 5))
    a = tn.softmax(tn.layer_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5))), -1).data
    b = tn.softmax(tn.layer_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5))), -1).data
    assert a.tobytes() == b.tobytes()
