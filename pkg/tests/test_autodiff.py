"""Tensor-core tests: values against hand/stdlib oracles, every gradient
against the central finite-difference oracle in conftest."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selfaug import autodiff as ad
from selfaug.errors import ConfigError, DomainError, ShapeError

from conftest import fd_grad, rel_err

RNG = np.random.default_rng(20240817)


def check_grad(build, *arrays, tol=1e-4, h=1e-5):
    """Backward() on sum-reduced build(*tensors) vs finite differences for
    each input array."""
    tensors = [ad.parameter(a.copy()) for a in arrays]
    out = build(*tensors)
    loss = out if out.size == 1 else ad.sum_all(out)
    ad.backward(loss)
    for i, t in enumerate(tensors):
        def f(x, i=i):
            probe = [ad.tensor(a.copy()) for a in arrays]
            probe[i] = ad.tensor(x)
            r = build(*probe)
            return float(r.data if r.size == 1 else r.data.sum())
        numeric = fd_grad(f, arrays[i].copy(), h=h)
        assert t.grad is not None
        err = rel_err(t.grad, numeric)
        assert err < tol, f"input {i}: relative error {err}"


class TestElementwise:
    def test_add_sub_mul_values(self):
        a = ad.tensor([[1.0, -2.0], [3.0, 0.5]])
        b = ad.tensor([[4.0, 1.5], [-1.0, 2.0]])
        np.testing.assert_array_equal(ad.add(a, b).data, [[5.0, -0.5], [2.0, 2.5]])
        np.testing.assert_array_equal(ad.sub(a, b).data, [[-3.0, -3.5], [4.0, -1.5]])
        np.testing.assert_array_equal(ad.mul(a, b).data, [[4.0, -3.0], [-3.0, 1.0]])

    def test_gradients(self):
        a = RNG.uniform(-2, 2, (3, 4))
        b = RNG.uniform(-2, 2, (3, 4))
        check_grad(ad.add, a, b)
        check_grad(ad.sub, a, b)
        check_grad(ad.mul, a, b)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            ad.add(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((3, 2))))


class TestUnary:
    def test_relu_gradient_pins(self):
        # gradient 1 at x=2, 0 at x=-1
        x = ad.parameter([2.0, -1.0])
        ad.backward(ad.sum_all(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [1.0, 0.0])

    def test_gelu_matches_tanh_formula(self):
        xs = RNG.uniform(-3, 3, 64)
        got = ad.gelu(ad.tensor(xs)).data
        c = math.sqrt(2.0 / math.pi)
        want = [0.5 * x * (1 + math.tanh(c * (x + 0.044715 * x**3))) for x in xs]
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_unary_gradients(self):
        x = RNG.uniform(-2, 2, (5, 3))
        for op in (ad.relu, ad.gelu, ad.neg):
            check_grad(op, x)
        pos = RNG.uniform(0.1, 2.0, (5, 3))
        for op in (ad.exp, ad.log, ad.sqrt):
            check_grad(op, pos)

    def test_exp_log_inverse(self):
        x = RNG.uniform(0.1, 3.0, 20)
        np.testing.assert_allclose(ad.log(ad.exp(ad.tensor(x))).data, x, rtol=1e-12)

    def test_log_rejects_non_positive(self):
        with pytest.raises(DomainError):
            ad.log(ad.tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            ad.sqrt(ad.tensor([-1.0]))

    def test_scale(self):
        check_grad(lambda t: ad.scale(t, -1.7), RNG.uniform(-2, 2, (4,)))


class TestMatmul:
    def test_identity(self):
        a = RNG.uniform(-2, 2, (3, 3))
        np.testing.assert_array_equal(
            ad.matmul(ad.tensor(a), ad.tensor(np.eye(3))).data, a)

    def test_all_ones_gradient(self):
        # d(sum(A @ B))/dA = d(sum(A @ B))/dB = [[2, 2], [2, 2]] for 2x2 ones
        a = ad.parameter(np.ones((2, 2)))
        b = ad.parameter(np.ones((2, 2)))
        ad.backward(ad.sum_all(ad.matmul(a, b)))
        np.testing.assert_array_equal(a.grad, np.full((2, 2), 2.0))
        np.testing.assert_array_equal(b.grad, np.full((2, 2), 2.0))

    def test_gradients_2d_and_batched(self):
        check_grad(ad.matmul, RNG.uniform(-2, 2, (3, 4)), RNG.uniform(-2, 2, (4, 2)))
        # batch dims broadcast: [2,3,4] @ [4,2] and [2,1,3,4] @ [2,5,4,2]
        check_grad(ad.matmul, RNG.uniform(-2, 2, (2, 3, 4)), RNG.uniform(-2, 2, (4, 2)))
        check_grad(ad.matmul,
                   RNG.uniform(-1, 1, (2, 1, 3, 4)),
                   RNG.uniform(-1, 1, (2, 5, 4, 2)))

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((2, 2))))

    def test_linear_matches_matmul_plus_bias(self):
        x = RNG.uniform(-2, 2, (4, 3, 5))
        w = RNG.uniform(-2, 2, (5, 7))
        b = RNG.uniform(-2, 2, 7)
        got = ad.linear(ad.tensor(x), ad.tensor(w), ad.tensor(b)).data
        np.testing.assert_allclose(got, x @ w + b, rtol=1e-15)
        check_grad(ad.linear, x, w, b)


class TestSoftmax:
    def test_uniform_rows(self):
        np.testing.assert_array_equal(
            ad.softmax_rows(ad.tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
        # max-subtraction keeps huge logits finite
        out = ad.softmax_rows(ad.tensor([[1000.0, 1000.0]])).data
        np.testing.assert_allclose(out, [[0.5, 0.5]], rtol=1e-15)

    def test_frozen_reference(self):
        # scalar-math oracle for softmax([1, 2, 3]), frozen
        got = ad.softmax_rows(ad.tensor([[1.0, 2.0, 3.0]])).data[0]
        want = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
        np.testing.assert_allclose(got, want, rtol=1e-14)

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=8))
    def test_rows_sum_to_one(self, row):
        out = ad.softmax_rows(ad.tensor([row])).data
        assert abs(out.sum() - 1.0) <= 1e-9

    def test_shift_invariance(self):
        x = RNG.uniform(-5, 5, (4, 6))
        a = ad.softmax_rows(ad.tensor(x)).data
        b = ad.softmax_rows(ad.tensor(x + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gradient(self):
        weights = ad.tensor(RNG.uniform(-1, 1, (3, 5)))
        check_grad(lambda t: ad.mul(ad.softmax_rows(t), weights),
                   RNG.uniform(-2, 2, (3, 5)))


class TestNormalizations:
    def test_layer_norm_constant_row_is_bias(self):
        # zero variance handled by eps; gain 1 / bias 0 gives exact zeros
        g, b = ad.tensor(np.ones(4)), ad.tensor(np.zeros(4))
        out = ad.layer_norm(ad.tensor([[3.0, 3.0, 3.0, 3.0]]), g, b)
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_layer_norm_mean_is_bias(self):
        x = RNG.uniform(-2, 2, (6, 8))
        bias = ad.tensor(np.full(8, 0.25))
        out = ad.layer_norm(ad.tensor(x), ad.tensor(np.ones(8)), bias)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.25, atol=1e-9)

    def test_layer_norm_gradients(self):
        check_grad(ad.layer_norm,
                   RNG.uniform(-2, 2, (4, 6)),
                   RNG.uniform(0.5, 1.5, 6),
                   RNG.uniform(-0.5, 0.5, 6))

    def test_batch_norm_two_point_column(self):
        out = ad.batch_norm_features(ad.tensor([[1.0], [3.0]]), eps=0.0)
        np.testing.assert_array_equal(out.data, [[-1.0], [1.0]])

    def test_batch_norm_idempotent(self):
        x = RNG.normal(0, 1, (64, 5))
        once = ad.batch_norm_features(ad.tensor(x), eps=1e-12).data
        twice = ad.batch_norm_features(ad.tensor(once), eps=1e-12).data
        np.testing.assert_allclose(twice, once, atol=1e-6)

    def test_batch_norm_rejects_single_row_in_training(self):
        with pytest.raises(ConfigError):
            ad.batch_norm_features(ad.tensor(np.ones((1, 4))))
        # eval mode degenerates to zeros instead
        out = ad.batch_norm_features(ad.tensor(np.ones((1, 4))), train=False)
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_batch_norm_gradient(self):
        # weight the output: the raw column sums are identically zero, which
        # would make the probe function constant
        weights = ad.tensor(RNG.uniform(-1, 1, (6, 4)))
        check_grad(lambda t: ad.mul(ad.batch_norm_features(t, eps=1e-5), weights),
                   RNG.uniform(-2, 2, (6, 4)))


class TestLosses:
    def test_cross_entropy_uniform_is_log2(self):
        loss = ad.cross_entropy(ad.tensor([[0.0, 0.0]]), np.array([0]))
        assert abs(loss.item() - math.log(2.0)) < 1e-12

    def test_cross_entropy_gradient_is_softmax_minus_onehot(self):
        x = RNG.uniform(-2, 2, (5, 4))
        t = RNG.integers(0, 4, 5)
        logits = ad.parameter(x.copy())
        ad.backward(ad.cross_entropy(logits, t))
        p = np.exp(x - x.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        p[np.arange(5), t] -= 1.0
        np.testing.assert_allclose(logits.grad, p / 5.0, rtol=1e-12)
        check_grad(lambda l: ad.cross_entropy(l, t), x)

    def test_cross_entropy_rejects_bad_target(self):
        with pytest.raises(DomainError, match="7"):
            ad.cross_entropy(ad.tensor(np.zeros((2, 3))), np.array([0, 7]))

    def test_bce_zero_logit_is_log2(self):
        loss = ad.binary_cross_entropy_with_logits(
            ad.tensor(np.zeros((1, 1))), np.ones((1, 1)))
        assert abs(loss.item() - math.log(2.0)) < 1e-12

    def test_bce_stable_for_large_logits(self):
        loss = ad.binary_cross_entropy_with_logits(
            ad.tensor([[1000.0, -1000.0]]), np.array([[1.0, 0.0]]))
        assert np.isfinite(loss.item()) and loss.item() < 1e-9

    def test_bce_gradient(self):
        x = RNG.uniform(-2, 2, (4, 8))
        t = RNG.integers(0, 2, (4, 8)).astype(float)
        check_grad(lambda l: ad.binary_cross_entropy_with_logits(l, t), x)

    def test_bce_rejects_non_binary_targets(self):
        with pytest.raises(DomainError):
            ad.binary_cross_entropy_with_logits(
                ad.tensor(np.zeros((1, 2))), np.array([[0.5, 1.0]]))


class TestStructuralOps:
    def test_gradients(self):
        x = RNG.uniform(-2, 2, (3, 4))
        check_grad(lambda t: ad.reshape(t, (4, 3)), x)
        check_grad(lambda t: ad.swap_axes(t, 0, 1), x)
        check_grad(lambda t: ad.broadcast_to(t, (5, 3, 4)), x)
        check_grad(lambda t: ad.slice_front(t, 2), x)
        check_grad(lambda t: ad.take_index(t, 0, axis=1), x)
        check_grad(lambda t: ad.sum_axis(t, 1), x)
        check_grad(ad.mean_all, x)

    def test_embedding_lookup_accumulates_repeated_ids(self):
        table = ad.parameter(RNG.uniform(-1, 1, (5, 3)))
        ids = np.array([[0, 2, 0]])
        ad.backward(ad.sum_all(ad.embedding_lookup(table, ids)))
        want = np.zeros((5, 3))
        want[0] = 2.0  # row 0 used twice
        want[2] = 1.0
        np.testing.assert_array_equal(table.grad, want)

    def test_embedding_lookup_rejects_out_of_range(self):
        with pytest.raises(DomainError):
            ad.embedding_lookup(ad.tensor(np.zeros((3, 2))), np.array([[3]]))

    def test_dropout(self):
        x = ad.parameter(RNG.uniform(-1, 1, (50, 4)))
        assert ad.dropout(x, 0.0, np.random.default_rng(0)) is x
        a = ad.dropout(x, 0.5, np.random.default_rng(9)).data
        b = ad.dropout(x, 0.5, np.random.default_rng(9)).data
        np.testing.assert_array_equal(a, b)
        kept = a != 0.0
        np.testing.assert_allclose(a[kept], 2.0 * x.data[kept], rtol=1e-15)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = ad.parameter(RNG.uniform(-1, 1, (3, 2)))
        ad.backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_two_uses_accumulate(self):
        # d(x*x + x*x)/dx = 4x, shared node visited exactly once
        xv = RNG.uniform(-2, 2, 5)
        x = ad.parameter(xv.copy())
        sq = ad.mul(x, x)
        ad.backward(ad.sum_all(ad.add(sq, sq)))
        np.testing.assert_allclose(x.grad, 4.0 * xv, rtol=1e-14)

    def test_shared_subexpression_equals_expanded_graph(self):
        xv = RNG.uniform(-2, 2, (4, 4))
        x1 = ad.parameter(xv.copy())
        shared = ad.mul(x1, x1)
        ad.backward(ad.sum_all(ad.add(shared, shared)))
        x2 = ad.parameter(xv.copy())
        ad.backward(ad.sum_all(ad.add(ad.mul(x2, x2), ad.mul(x2, x2))))
        np.testing.assert_array_equal(x1.grad, x2.grad)

    def test_accumulates_across_backward_calls(self):
        x = ad.parameter(np.array([1.5, -0.5]))
        ad.backward(ad.sum_all(x))
        ad.backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_unreachable_tensor_untouched(self):
        x = ad.parameter(np.ones(3))
        bystander = ad.parameter(np.ones(3))
        ad.backward(ad.sum_all(ad.mul(x, x)))
        assert bystander.grad is None

    def test_detach_blocks_gradient(self):
        x = ad.parameter(np.array([2.0]))
        y = ad.mul(x, x)
        ad.backward(ad.sum_all(ad.mul(y.detach(), x)))
        np.testing.assert_array_equal(x.grad, [4.0])  # only the direct factor

    def test_rejects_non_scalar_loss(self):
        with pytest.raises(ShapeError):
            ad.backward(ad.parameter(np.ones(3)))

    def test_no_grad_suppresses_graph(self):
        x = ad.parameter(np.ones((2, 2)))
        with ad.no_grad():
            y = ad.mul(x, x)
        assert y.node is None


class TestNumericGuards:
    def test_no_nan_inf_for_bounded_inputs(self):
        # |x| <= 1e3 must never produce NaN/Inf on any op's forward
        x = RNG.uniform(-1e3, 1e3, (8, 8))
        pos = np.abs(x) + 1e-6
        outs = [
            ad.matmul(ad.tensor(x), ad.tensor(x)).data,
            ad.add(ad.tensor(x), ad.tensor(x)).data,
            ad.mul(ad.tensor(x), ad.tensor(x)).data,
            ad.relu(ad.tensor(x)).data,
            ad.gelu(ad.tensor(x)).data,
            ad.exp(ad.tensor(x)).data,
            ad.log(ad.tensor(pos)).data,
            ad.sqrt(ad.tensor(pos)).data,
            ad.softmax_rows(ad.tensor(x)).data,
            ad.layer_norm(ad.tensor(x), ad.tensor(np.ones(8)),
                          ad.tensor(np.zeros(8))).data,
            ad.batch_norm_features(ad.tensor(x)).data,
            ad.cross_entropy(ad.tensor(x), np.zeros(8, dtype=int)).data,
            ad.binary_cross_entropy_with_logits(
                ad.tensor(x), (x > 0).astype(float)).data,
        ]
        for out in outs:
            assert np.all(np.isfinite(out))

    def test_exp_saturates_instead_of_overflowing(self):
        out = ad.exp(ad.tensor([1000.0])).data
        assert np.isfinite(out).all()
