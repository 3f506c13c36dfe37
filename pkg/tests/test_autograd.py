import numpy as np
import pytest

import sstag.autograd as ag
from fdcheck import check_scalar_fn, finite_diff_grads, max_rel_error
from sstag.autograd import (
    Tensor,
    backward,
    concat,
    cosine_rows,
    cross_entropy_from_logits,
    dropout,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    mean_,
    mse,
    mul,
    nll_rows,
    no_grad,
    power,
    record_ops,
    relu,
    reshape,
    slice_,
    softmax_last,
    softmax_rows,
    sub,
    sum_,
    transpose,
)
from sstag.util import ValidationError


def rt(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# -- forward facts ------------------------------------------------------------


def test_matmul_identity():
    a = rt((4, 4), 0)
    out = matmul(a, Tensor(np.eye(4)))
    assert np.allclose(out.data, a.data)


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(ValidationError, match=r"\(2, 3\) @ \(2, 3\)"):
        matmul(rt((2, 3), 0), rt((2, 3), 1))


def test_concat_shapes():
    a, b = rt((2, 3), 0), rt((2, 5), 1)
    out = concat([a, b], axis=1)
    assert out.shape == (2, 8)
    assert np.array_equal(out.data[:, :3], a.data)


def test_softmax_rows_sum_one_uniform():
    x = Tensor(np.zeros((3, 7)))
    s = softmax_rows(x)
    assert np.allclose(s.data, 1 / 7)
    assert np.allclose(s.data.sum(axis=1), 1.0)


def test_softmax_overflow_safe():
    x = Tensor(np.array([[1e6, 1e6 + 1.0], [-1e6, 0.0]]))
    s = softmax_last(x)
    assert np.all(np.isfinite(s.data))
    assert np.allclose(s.data.sum(axis=1), 1.0)


def test_cross_entropy_uniform_is_log_classes():
    logits = Tensor(np.zeros((5, 8)))
    loss = cross_entropy_from_logits(logits, np.arange(5) % 8)
    assert loss.data == pytest.approx(np.log(8), abs=1e-12)


def test_cross_entropy_confident_near_zero():
    logits = np.zeros((4, 6))
    targets = np.array([1, 2, 3, 4])
    logits[np.arange(4), targets] = 30.0
    loss = cross_entropy_from_logits(Tensor(logits), targets)
    assert loss.data < 1e-9


def test_cross_entropy_validates_targets():
    with pytest.raises(ValidationError, match="out of range"):
        cross_entropy_from_logits(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cosine_identical_and_orthogonal():
    a = np.array([[1.0, 2.0, 2.0], [0.0, 3.0, 4.0]])
    c_same = cosine_rows(Tensor(a), Tensor(a.copy()))
    assert np.allclose(c_same.data, 1.0)
    x = Tensor(np.array([[1.0, 0.0]]))
    y = Tensor(np.array([[0.0, 5.0]]))
    assert cosine_rows(x, y).data[0] == pytest.approx(0.0, abs=1e-15)


def test_cosine_zero_norm_row_flagged_zero_grad():
    before = ag.zero_norm_row_count
    a = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]), requires_grad=True)
    b = Tensor(np.array([[2.0, 1.0], [1.0, 0.0]]), requires_grad=True)
    c = cosine_rows(a, b)
    assert c.data[0] == 0.0 and c.data[1] == 1.0
    backward(sum_(c))
    assert np.allclose(a.grad[0], 0.0)
    assert np.allclose(b.grad[0], 0.0)
    assert ag.zero_norm_row_count == before + 1


def test_mse_identities():
    a = Tensor(np.ones((3, 4)))
    assert mse(a, Tensor(np.ones((3, 4)))).data == 0.0
    b = Tensor(np.zeros((1, 4)))
    assert mse(Tensor(np.ones((1, 4))), b).data == pytest.approx(4.0, abs=1e-15)


def test_gelu_relu_fixed_points():
    x = Tensor(np.array([[-2.0, 0.0, 3.0]]))
    r = relu(x)
    assert r.data.tolist() == [[0.0, 0.0, 3.0]]
    g = gelu(Tensor(np.array([[0.0]])))
    assert g.data[0, 0] == 0.0


def test_layer_norm_normalizes():
    x = rt((4, 6), 3, scale=5.0)
    out = layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(out.data.std(axis=-1), 1.0, atol=1e-3)


def test_gather_rows_validates():
    with pytest.raises(ValidationError, match="out of range"):
        gather_rows(rt((3, 2), 0), np.array([0, 3]))


# -- gradient checks (20 random instances per op family) ----------------------


def test_grad_matmul_2d():
    for seed in range(20):
        a, b = rt((3, 4), seed), rt((4, 2), 100 + seed)
        check_scalar_fn(lambda: sum_(matmul(a, b)), [a, b])


def test_grad_matmul_batched():
    for seed in range(10):
        a, b = rt((2, 3, 4, 5), seed), rt((2, 3, 5, 3), 50 + seed)
        check_scalar_fn(lambda: sum_(matmul(a, b)), [a, b])


def test_grad_matmul_broadcast_leading():
    a, b = rt((2, 4, 3, 5), 0), rt((5, 6), 1)
    check_scalar_fn(lambda: sum_(matmul(a, b)), [a, b])


def test_grad_add_sub_mul_broadcast():
    for seed in range(20):
        a = rt((4, 5), seed)
        b = rt((5,), 200 + seed)
        c = rt((4, 1), 400 + seed)
        check_scalar_fn(lambda: sum_(mul(sub(a, b), c)), [a, b, c])


def test_grad_concat_slice():
    for seed in range(10):
        a, b = rt((3, 2), seed), rt((3, 4), 30 + seed)
        check_scalar_fn(lambda: sum_(slice_(concat([a, b], axis=1), (slice(None), slice(1, 5)))), [a, b])


def test_grad_transpose_reshape():
    for seed in range(10):
        a = rt((2, 3, 4), seed)
        w = rt((24,), 60 + seed)

        def build():
            flat = reshape(transpose(a, (2, 0, 1)), (1, 24))
            return sum_(mul(flat, w))

        check_scalar_fn(build, [a, w])


def test_grad_gather_rows_with_repeats():
    for seed in range(10):
        table = rt((6, 3), seed)
        idx = np.array([0, 2, 2, 5, 0])
        w = rt((5, 3), 90 + seed)
        check_scalar_fn(lambda: sum_(mul(gather_rows(table, idx), w)), [table, w])


def test_grad_softmax():
    for seed in range(20):
        a = rt((4, 6), seed, scale=2.0)
        w = rt((4, 6), 300 + seed)
        check_scalar_fn(lambda: sum_(mul(softmax_last(a), w)), [a, w])


def test_grad_layer_norm():
    for seed in range(20):
        x = rt((3, 8), seed, scale=3.0)
        gain = rt((8,), 500 + seed)
        bias = rt((8,), 600 + seed)
        w = rt((3, 8), 700 + seed)
        check_scalar_fn(lambda: sum_(mul(layer_norm(x, gain, bias), w)), [x, gain, bias, w])


def test_grad_gelu_relu_power():
    for seed in range(20):
        a = rt((5, 4), seed, scale=1.5)
        check_scalar_fn(lambda: sum_(gelu(a)), [a])
        b = rt((5, 4), 800 + seed, scale=1.5)
        # keep FD away from the relu kink
        b.data[np.abs(b.data) < 1e-3] += 0.1
        check_scalar_fn(lambda: sum_(relu(b)), [b])
        c = Tensor(np.abs(np.random.default_rng(seed).normal(size=(3, 3))) + 0.5, requires_grad=True)
        check_scalar_fn(lambda: sum_(power(c, -0.5)), [c])


def test_grad_nll_and_cross_entropy():
    for seed in range(20):
        logits = rt((6, 5), seed, scale=2.0)
        targets = np.random.default_rng(seed).integers(0, 5, size=6)
        check_scalar_fn(lambda: cross_entropy_from_logits(logits, targets), [logits])
        w = rt((6,), 900 + seed)
        check_scalar_fn(lambda: sum_(mul(nll_rows(logits, targets), w)), [logits, w])


def test_grad_cosine_mse():
    for seed in range(20):
        a, b = rt((4, 5), seed), rt((4, 5), 1000 + seed)
        check_scalar_fn(lambda: sum_(cosine_rows(a, b)), [a, b])
        check_scalar_fn(lambda: mse(a, b), [a, b])


def test_grad_sum_mean_axes():
    for seed in range(10):
        a = rt((3, 4, 5), seed)
        check_scalar_fn(lambda: sum_(mean_(a, axis=1)), [a])
        check_scalar_fn(lambda: mean_(sum_(a, axis=2)), [a])


# -- engine semantics ----------------------------------------------------------


def test_backward_requires_scalar():
    a = rt((2, 2), 0)
    with pytest.raises(ValidationError, match="scalar"):
        backward(mul(a, 2.0))


def test_disconnected_parameter_gets_no_grad():
    a, b = rt((2, 2), 0), rt((2, 2), 1)
    loss = sum_(mul(a, a))
    backward(loss)
    assert b.grad is None
    assert a.grad is not None


def test_backward_accumulates_on_leaves():
    a = rt((3,), 0)
    loss = sum_(mul(a, a))
    backward(loss)
    once = a.grad.copy()
    backward(loss)
    assert np.allclose(a.grad, 2 * once)


def test_backward_linear_in_scale():
    a = rt((3, 3), 2)
    loss = sum_(gelu(a))
    backward(loss)
    g1 = a.grad.copy()
    a.zero_grad()
    backward(mul(loss, 3.5))
    assert np.allclose(a.grad, 3.5 * g1, atol=1e-12)


def test_shared_subexpression_fanout():
    a = rt((2, 2), 4)
    h = mul(a, a)
    loss = sum_(sub(h, mul(h, 0.5)))
    backward(loss)
    assert np.allclose(a.grad, a.data)  # d/da of 0.5*a^2 summed


def test_no_grad_builds_no_graph():
    a = rt((2, 2), 0)
    with no_grad():
        out = mul(a, a)
    assert out.is_leaf and not out.requires_grad
    assert out._parents == ()


def test_record_ops_traces_even_without_grad():
    a = rt((2, 2), 0)
    with no_grad():
        with record_ops([]) as trace:
            mul(gelu(a), 2.0)
    assert trace == ["gelu", "mul"]


def test_nested_traces_both_capture():
    a = rt((2, 2), 0)
    with record_ops([]) as outer:
        relu(a)
        with record_ops([]) as inner:
            gelu(a)
    assert outer == ["relu", "gelu"]
    assert inner == ["gelu"]


def test_detach_blocks_gradient():
    a = rt((2, 2), 0)
    loss = sum_(mul(a.detach(), a))
    backward(loss)
    assert np.allclose(a.grad, a.data)  # only the live operand contributes


# -- dropout ---------------------------------------------------------------


def test_dropout_identity_when_idle():
    a = rt((4, 4), 0)
    assert dropout(a, 0.0, None, True) is a
    assert dropout(a, 0.5, None, False) is a


def test_dropout_scales_kept_units():
    a = Tensor(np.ones((2000, 1)), requires_grad=True)
    out = dropout(a, 0.25, np.random.default_rng(0), True)
    kept = out.data[out.data > 0]
    assert np.allclose(kept, 1 / 0.75)
    assert abs(out.data.mean() - 1.0) < 0.05


def test_dropout_backward_uses_same_mask():
    a = rt((50, 4), 1)
    out = dropout(a, 0.5, np.random.default_rng(3), True)
    backward(sum_(out))
    dead = out.data == 0
    assert np.all(a.grad[dead] == 0)
    assert np.allclose(a.grad[~dead], 2.0)


def test_dropout_validates_rate():
    with pytest.raises(ValidationError):
        dropout(rt((2, 2), 0), 1.0, np.random.default_rng(0), True)


# -- oracle sanity -------------------------------------------------------------


def test_fd_harness_catches_wrong_gradient():
    a = rt((3,), 0)
    loss = sum_(mul(a, a))
    backward(loss)
    wrong = [a.grad * 1.01]
    numeric = finite_diff_grads(lambda: sum_(mul(a, a)).data, [a])
    assert max_rel_error(wrong, numeric) > 1e-3
