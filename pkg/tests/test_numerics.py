import numpy as np
import pytest

from fieldattn.errors import DomainError
from fieldattn import numerics as nm


def test_softmax_row_uniform():
    out = nm.softmax_row([0.0, 0.0])
    assert np.allclose(out, [0.5, 0.5], atol=1e-15)


def test_softmax_row_log_ratio():
    out = nm.softmax_row([np.log(2.0), 0.0])
    assert np.allclose(out, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)


def test_softmax_row_large_logits_stable():
    out = nm.softmax_row([1000.0, 0.0])
    assert np.all(np.isfinite(out))
    assert out[0] > 0.999
    assert abs(out.sum() - 1.0) < 1e-12


def test_softmax_row_rejects_bad_input():
    with pytest.raises(DomainError):
        nm.softmax_row([])
    with pytest.raises(DomainError):
        nm.softmax_row([np.nan, 0.0])
    with pytest.raises(DomainError):
        nm.softmax_row([[0.0, 1.0]])


def test_layer_norm_unit_pair():
    out = nm.layer_norm([1.0, -1.0], [1.0, 1.0], [0.0, 0.0], 1e-5)
    assert np.allclose(out, [1.0, -1.0], atol=1e-2)


def test_layer_norm_constant_input():
    out = nm.layer_norm([5.0, 5.0], [1.0, 1.0], [0.0, 0.0], 1e-5)
    assert np.allclose(out, [0.0, 0.0], atol=1e-12)


def test_layer_norm_affine():
    out = nm.layer_norm([0.0, 2.0], [1.0, 1.0], [0.0, 0.0], 1e-8)
    assert np.allclose(out, [-1.0, 1.0], atol=1e-4)
    shifted = nm.layer_norm([0.0, 2.0], [2.0, 2.0], [1.0, 1.0], 1e-8)
    assert np.allclose(shifted, 2.0 * out + 1.0, atol=1e-12)


def test_layer_norm_validation():
    with pytest.raises(DomainError):
        nm.layer_norm([1.0, 2.0], [1.0], [0.0, 0.0], 1e-5)
    with pytest.raises(DomainError):
        nm.layer_norm([1.0, 2.0], [1.0, 1.0], [0.0, 0.0], 0.0)


def test_adam_first_step_moves_by_lr():
    # With grad 1 everywhere, bias correction makes the first update
    # exactly -lr / (1 + eps') with eps' tiny, so ~ -0.1 at lr=0.1.
    p = np.zeros(3)
    g = np.ones(3)
    st = nm.AdamState.for_param(p, learning_rate=0.1)
    p2, st2 = nm.adam_step(p, g, st)
    assert np.allclose(p2, -0.1, atol=1e-8)
    assert st2.step == 1
    assert st.step == 0  # input state untouched


def test_adam_zero_grad_no_move():
    p = np.array([1.0, -2.0])
    st = nm.AdamState.for_param(p, learning_rate=0.5)
    p2, _ = nm.adam_step(p, np.zeros_like(p), st)
    assert np.array_equal(p2, p)


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    p = rng.normal(size=5)
    g = rng.normal(size=5)
    st = nm.AdamState.for_param(p, learning_rate=0.01)
    a1, s1 = nm.adam_step(p, g, st)
    a2, s2 = nm.adam_step(p, g, st)
    assert np.array_equal(a1, a2)
    assert np.array_equal(s1.first_moment, s2.first_moment)
    a3, _ = nm.adam_step(a1, g, s1)
    b3, _ = nm.adam_step(a2, g, s2)
    assert np.array_equal(a3, b3)


def test_adam_shape_mismatch():
    p = np.zeros(3)
    st = nm.AdamState.for_param(p)
    with pytest.raises(DomainError):
        nm.adam_step(p, np.zeros(4), st)


def test_finite_diff_quadratic():
    g = nm.finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_diff_multivariate():
    f = lambda x: float(x[0] * x[1] + np.sin(x[2]))
    at = np.array([2.0, -1.0, 0.3])
    g = nm.finite_diff_grad(f, at, 1e-6)
    expect = np.array([-1.0, 2.0, np.cos(0.3)])
    assert np.allclose(g, expect, atol=1e-7)


def test_finite_diff_rejects_nonfinite():
    with np.errstate(invalid="ignore", divide="ignore"):
        with pytest.raises(DomainError):
            nm.finite_diff_grad(lambda x: float(np.log(x[0])),
                                np.array([0.0]), 1e-5)


def test_rel_error_symmetry_and_zero():
    a = np.array([1.0, 2.0])
    assert nm.rel_error(a, a) == 0.0
    assert nm.rel_error(a, np.zeros(2)) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Tape ops vs the finite-difference oracle
# ---------------------------------------------------------------------------

def _check_tape_grad(build, x0, tol=1e-6):
    """build(tensor) -> scalar Tensor; compare tape grad to central diff."""
    x0 = np.asarray(x0, dtype=np.float64)

    def f(flat):
        t = nm.parameter(flat.reshape(x0.shape))
        return float(build(t).data)

    t = nm.parameter(x0)
    out = build(t)
    out.backward()
    num = nm.finite_diff_grad(f, x0.ravel(), 1e-6)
    assert nm.rel_error(t.grad.ravel(), num) < tol


def test_tape_add_mul_broadcast():
    rng = np.random.default_rng(1)
    a0 = rng.normal(size=(3, 4))

    def build(a):
        b = nm.parameter(np.ones((1, 4)) * 0.5)
        return nm.reduce_sum(nm.mul(nm.add(a, b), a))

    _check_tape_grad(build, a0)


def test_tape_matmul():
    rng = np.random.default_rng(2)
    a0 = rng.normal(size=(2, 3))
    bmat = rng.normal(size=(3, 4))

    def build(a):
        return nm.reduce_sum(nm.matmul(a, nm.parameter(bmat)))

    _check_tape_grad(build, a0)


def test_tape_matmul_batched_broadcast():
    rng = np.random.default_rng(3)
    a0 = rng.normal(size=(2, 5, 3))
    bmat = rng.normal(size=(3, 3))

    def build(a):
        prod = nm.matmul(a, nm.parameter(bmat))
        return nm.reduce_sum(nm.mul(prod, prod))

    _check_tape_grad(build, a0)


def test_tape_softmax():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))

    def build(x):
        return nm.reduce_sum(nm.mul(nm.softmax(x, axis=-1), nm.parameter(w)))

    _check_tape_grad(build, x0)


def test_tape_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    x = nm.parameter(rng.normal(size=(4, 7)) * 10.0)
    y = nm.softmax(x, axis=-1)
    assert np.allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)


def test_tape_layer_norm():
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(2, 6))
    w = rng.normal(size=(2, 6))

    def build(x):
        gain = nm.parameter(np.full(6, 1.3))
        shift = nm.parameter(np.full(6, -0.2))
        return nm.reduce_sum(nm.mul(nm.layer_norm_t(x, gain, shift, 1e-5),
                                    nm.parameter(w)))

    _check_tape_grad(build, x0)


def test_tape_layer_norm_gain_shift_grads():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 4))
    g0 = rng.normal(size=4)

    def build(gain):
        shift = nm.parameter(np.zeros(4))
        return nm.reduce_sum(nm.layer_norm_t(nm.parameter(x), gain, shift, 1e-5))

    _check_tape_grad(build, g0)


def test_tape_sigmoid_log_relu():
    rng = np.random.default_rng(8)
    x0 = rng.normal(size=7)

    def build(x):
        s = nm.sigmoid(x)
        return nm.reduce_sum(nm.log(nm.add(s, 0.1)))

    _check_tape_grad(build, x0)

    def build_relu(x):
        r = nm.relu(x)
        return nm.reduce_sum(nm.mul(r, r))

    # keep coordinates away from the relu kink
    x1 = x0 + np.sign(x0) * 0.05
    _check_tape_grad(build_relu, x1)


def test_tape_clip_interior_and_edges():
    x = nm.parameter(np.array([-2.0, 0.5, 3.0]))
    y = nm.reduce_sum(nm.clip(x, 0.0, 1.0))
    y.backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_tape_take_rows():
    rng = np.random.default_rng(9)
    table0 = rng.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4])
    w = rng.normal(size=(4, 3))

    def build(table):
        return nm.reduce_sum(nm.mul(nm.take_rows(table, idx), nm.parameter(w)))

    _check_tape_grad(build, table0)


def test_tape_take_along():
    rng = np.random.default_rng(10)
    a0 = rng.normal(size=(3, 5))
    idx = np.array([[0, 4], [1, 1], [2, 3]])
    w = rng.normal(size=(3, 2))

    def build(a):
        return nm.reduce_sum(nm.mul(nm.take_along(a, idx, axis=1), nm.parameter(w)))

    _check_tape_grad(build, a0)


def test_tape_take_along_repeated_index_accumulates():
    a = nm.parameter(np.zeros((1, 3)))
    idx = np.array([[1, 1]])
    y = nm.reduce_sum(nm.take_along(a, idx, axis=1))
    y.backward()
    assert np.array_equal(a.grad, [[0.0, 2.0, 0.0]])


def test_tape_stack_transpose_reshape():
    rng = np.random.default_rng(11)
    a0 = rng.normal(size=(2, 3))

    def build(a):
        b = nm.parameter(np.ones((2, 3)))
        s = nm.stack_t([a, b], axis=1)          # (2, 2, 3)
        t = nm.transpose(s, (1, 0, 2))          # (2, 2, 3)
        r = nm.reshape(t, (4, 3))
        return nm.reduce_sum(nm.mul(r, r))

    _check_tape_grad(build, a0)


def test_tape_reduce_sum_axis_keepdims():
    rng = np.random.default_rng(12)
    a0 = rng.normal(size=(3, 4))

    def build(a):
        partial = nm.reduce_sum(a, axis=1, keepdims=True)   # (3, 1)
        return nm.reduce_sum(nm.mul(partial, partial))

    _check_tape_grad(build, a0)


def test_tape_gradient_accumulates_across_uses():
    x = nm.parameter(np.array([2.0]))
    y = nm.reduce_sum(nm.add(nm.mul(x, x), x))  # x^2 + x -> dy/dx = 2x + 1
    y.backward()
    assert np.allclose(x.grad, [5.0])


def test_tape_backward_requires_scalar():
    x = nm.parameter(np.array([1.0, 2.0]))
    with pytest.raises(DomainError):
        nm.add(x, x).backward()


def test_tape_shared_subgraph():
    # The same node feeding two consumers must get both contributions.
    x = nm.parameter(np.array([3.0]))
    h = nm.mul(x, 2.0)
    y = nm.reduce_sum(nm.add(nm.mul(h, h), h))  # 4x^2 + 2x -> 8x + 2 = 26
    y.backward()
    assert np.allclose(x.grad, [26.0])
