import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from funcnorm.autodiff import ContractError, DimensionError, NumericError, Tape, finite_diff_gradient


def test_relu_values():
    t = Tape()
    out = t.relu(t.constant([-1.0, 0.0, 2.0]))
    assert out.value.tolist() == [0.0, 0.0, 2.0]


def test_matmul_identity():
    b = np.random.default_rng(0).standard_normal((3, 4))
    t = Tape()
    assert np.array_equal(t.matmul(t.constant(np.eye(3)), t.constant(b)).value, b)


def test_cross_entropy_zero_logits():
    t = Tape()
    loss = t.softmax_cross_entropy(t.constant(np.zeros((1, 10))), np.array([3]))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)
    assert loss.item() == pytest.approx(2.302585, abs=1e-6)


def test_square_derivative():
    t = Tape()
    x = t.leaf(3.0)
    (g,) = t.grad(x * x, [x])
    assert g == 6.0


def test_relu_mean_subgradient():
    t = Tape()
    x = t.leaf([-1.0, 2.0])
    (g,) = t.grad(t.mean(t.relu(x)), [x])
    assert g.tolist() == [0.0, 0.5]


def test_relu_derivative_at_zero_is_zero():
    t = Tape()
    x = t.leaf([0.0, 0.0])
    (g,) = t.grad(t.sum(t.relu(x)), [x])
    assert g.tolist() == [0.0, 0.0]


def test_shape_mismatch_raises():
    t = Tape()
    with pytest.raises(DimensionError):
        t.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))


def test_nonfinite_input_raises():
    t = Tape()
    with pytest.raises(NumericError):
        t.constant([1.0, np.nan])
    with pytest.raises(NumericError):
        t.leaf([np.inf])


def test_overflow_raises():
    t = Tape()
    x = t.constant([1e200])
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError):
            t.mul(x, x)


def test_backward_needs_scalar():
    t = Tape()
    x = t.leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        t.backward(t.relu(x))


def test_single_backward_per_tape():
    t = Tape()
    x = t.leaf(2.0)
    y = x * x
    t.backward(y)
    with pytest.raises(ContractError):
        t.backward(y)
    with pytest.raises(ContractError):
        t.relu(x)


def test_mixing_tapes_rejected():
    a, b = Tape(), Tape()
    with pytest.raises(ContractError):
        a.add(a.leaf(1.0), b.leaf(1.0))


def test_unused_leaf_gets_zero_gradient():
    t = Tape()
    x, y = t.leaf([1.0, 2.0]), t.leaf([3.0])
    gx, gy = t.grad(t.sum(x), [x, y])
    assert gx.tolist() == [1.0, 1.0] and gy.tolist() == [0.0]


def test_fd_sum_of_squares():
    g = finite_diff_gradient(lambda p: float(np.sum(p * p)), np.array([1.0, 2.0]), h=1e-6)
    assert np.allclose(g, [2.0, 4.0], atol=1e-6)


def test_fd_constant():
    assert np.array_equal(finite_diff_gradient(lambda p: 3.0, np.zeros(4)), np.zeros(4))


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda p: 0.0, np.zeros(2), h=0.0)


def _two_layer_loss(params, x, y, dtype=np.float64):
    t = Tape(dtype)
    w1, b1, w2, b2 = (t.leaf(p) for p in params)
    h = t.relu(t.add_bias(t.matmul(t.constant(x), w1), b1))
    out = t.softmax_cross_entropy(t.add_bias(t.matmul(h, w2), b2), y)
    return t, out, [w1, b1, w2, b2]


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(3)
    x, y = rng.uniform(-1, 1, (6, 4)), rng.integers(0, 3, 6)
    params = [rng.standard_normal((4, 8)), rng.standard_normal(8) * 0.1,
              rng.standard_normal((8, 3)), rng.standard_normal(3) * 0.1]
    t, out, leaves = _two_layer_loss(params, x, y)
    grads = t.grad(out, leaves)
    for k in range(4):
        def fn(p, k=k):
            ps = list(params)
            ps[k] = p
            return _two_layer_loss(ps, x, y, np.longdouble)[1].value
        fd = finite_diff_gradient(fn, params[k].astype(np.longdouble), h=1e-5).astype(float)
        mask = np.maximum(abs(fd), abs(grads[k])) > 1e-8
        rel = abs(fd - grads[k])[mask] / np.maximum(abs(fd), abs(grads[k]))[mask]
        assert rel.max() <= 1e-4


def test_each_op_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    a0 = rng.uniform(-1, 1, (5, 3))
    b0 = rng.uniform(-1, 1, (3, 4))
    v0 = rng.uniform(0.5, 1.5, 4)
    g0, be0 = rng.uniform(0.5, 1.5, 4), rng.uniform(-1, 1, 4)
    labels = rng.integers(0, 4, 5)

    def build(a, b, v, gamma, beta, dtype=np.float64):
        t = Tape(dtype)
        leaves = [t.leaf(a), t.leaf(b), t.leaf(v), t.leaf(gamma), t.leaf(beta)]
        la, lb, lv, lg, lbe = leaves
        h = t.matmul(la, lb)
        h, _, _ = t.batch_norm(h, lg, lbe)
        h = t.col_scale(h, lv)
        h = t.add(h, t.mul(h, h))
        h = t.sub(h, t.scale(t.relu(h), 0.5))
        out = t.add(t.softmax_cross_entropy(h, labels), t.mean(t.row_sq_l2(h)))
        out = t.add(out, t.scale(t.sum_sq(lb), 0.1))
        return t, out, leaves

    base = [a0, b0, v0, g0, be0]
    t, out, leaves = build(*base)
    grads = t.grad(out, leaves)
    for k in range(len(base)):
        def fn(p, k=k):
            args = list(base)
            args[k] = p
            return build(*args, dtype=np.longdouble)[1].value
        fd = finite_diff_gradient(fn, base[k].astype(np.longdouble), h=1e-5).astype(float)
        assert np.allclose(fd, grads[k], rtol=1e-6, atol=1e-9)


def test_replay_is_bit_identical():
    rng = np.random.default_rng(1)
    params = [rng.standard_normal((4, 8)), np.zeros(8), rng.standard_normal((8, 3)), np.zeros(3)]
    x, y = rng.uniform(-1, 1, (6, 4)), rng.integers(0, 3, 6)
    t1, o1, l1 = _two_layer_loss(params, x, y)
    t2, o2, l2 = _two_layer_loss(params, x, y)
    assert o1.value.tobytes() == o2.value.tobytes()
    for g1, g2 in zip(t1.grad(o1, l1), t2.grad(o2, l2)):
        assert g1.tobytes() == g2.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)), st.integers(-20, 20))
def test_relu_positive_homogeneity_power_of_two(x, k):
    c = 2.0 ** k
    t = Tape()
    assert np.array_equal(t.relu(t.constant(c * x)).value, c * t.relu(t.constant(x)).value)


def test_relu_pattern_records_masks():
    t = Tape()
    t.relu(t.constant([[-1.0, 1.0]]))
    t.relu(t.constant([2.0, -3.0, 0.0]))
    assert t.relu_pattern().tolist() == [False, True, True, False, False]
