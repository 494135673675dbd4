"""
Tests for the dense tensor substrate
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bmlp.core.numerics import (
    Activation,
    AdamState,
    Mode,
    RngStream,
    activation,
    activation_grad,
    adam_step,
    dense,
    dense_backward,
    dropout,
    gelu,
    grad_check,
    layer_norm,
    layer_norm_backward,
    layer_norm_forward,
    sigmoid,
    softmax,
    softmax_backward,
)
from bmlp.errors import DimensionError, InvalidMaskError, NonFiniteError


class TestRngStream:

    def test_same_key_same_draws(self):
        a = RngStream(7, counter=3, lane=2).generator().random(5)
        b = RngStream(7, counter=3, lane=2).generator().random(5)
        assert_array_equal(a, b)

    def test_child_and_advance_are_distinct_streams(self):
        base = RngStream(7)
        draws = {
            tuple(s.generator().random(3))
            for s in (base, base.child(0), base.child(1), base.advance())
        }
        assert len(draws) == 4


class TestDense:

    def test_identity_input(self):
        W = np.array([[2.0, 0.0], [0.0, 3.0]])
        assert_array_equal(dense(np.eye(2), W), W)

    def test_identity_weight_plus_bias(self):
        Y = dense(np.array([[1.0, 1.0]]), np.eye(2), np.array([[5.0, 5.0]]))
        assert_array_equal(Y, [[6.0, 6.0]])

    def test_matches_triple_loop(self, gen):
        X, W = gen.normal(size=(3, 4)), gen.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += X[i, k] * W[k, j]
        assert_allclose(dense(X, W), expected, atol=1e-12)

    def test_associativity(self, gen):
        X, A, B = gen.normal(size=(3, 4)), gen.normal(size=(4, 5)), gen.normal(size=(5, 2))
        assert_allclose(dense(dense(X, A), B), dense(X, A @ B), atol=1e-10)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            dense(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_backward_shapes_and_bias(self, gen):
        X, W = gen.normal(size=(3, 4)), gen.normal(size=(4, 2))
        dY = gen.normal(size=(3, 2))
        dX, dW, db = dense_backward(dY, X, W)
        assert dX.shape == X.shape and dW.shape == W.shape
        assert_allclose(db, dY.sum(axis=0, keepdims=True))


class TestActivation:

    def test_fixed_points(self):
        assert gelu(np.array(0.0)) == 0.0
        assert sigmoid(np.array(0.0)) == 0.5

    def test_gelu_uses_exact_erf_form(self):
        # 3·Φ(3)
        assert float(gelu(np.array(3.0))) == pytest.approx(2.99595030590511, rel=1e-12)

    @pytest.mark.parametrize("kind", list(Activation))
    def test_grad_matches_central_difference(self, kind):
        x = np.linspace(-4.0, 4.0, 17)
        h = 1e-6
        numeric = (activation(kind, x + h) - activation(kind, x - h)) / (2 * h)
        assert_allclose(activation_grad(kind, x), numeric, atol=1e-8)


class TestLayerNorm:

    def test_constant_row_collapses_to_zero(self):
        Y = layer_norm(np.full((1, 4), 3.0), np.ones((1, 4)), np.zeros((1, 4)))
        assert_allclose(Y, 0.0, atol=1e-12)

    def test_unit_row_unchanged(self):
        Y = layer_norm(np.array([[1.0, -1.0]]), np.ones((1, 2)), np.zeros((1, 2)))
        assert_allclose(Y, [[1.0, -1.0]], atol=1e-4)

    def test_row_statistics(self, gen):
        Y = layer_norm(gen.normal(2.0, 5.0, size=(6, 16)), np.ones((1, 16)), np.zeros((1, 16)))
        assert np.abs(Y.mean(axis=1)).max() < 1e-10
        assert np.abs(Y.var(axis=1) - 1.0).max() < 1e-3

    def test_backward_matches_finite_differences(self, gen):
        X = gen.normal(size=(3, 6))
        gamma, beta = gen.normal(size=(1, 6)), gen.normal(size=(1, 6))
        R = gen.normal(size=(3, 6))
        _, cache = layer_norm_forward(X, gamma, beta)
        dX, dgamma, dbeta = layer_norm_backward(R, cache)
        result = grad_check(
            lambda: float((layer_norm(X, gamma, beta) * R).sum()),
            {"X": X, "gamma": gamma, "beta": beta},
            {"X": dX, "gamma": dgamma, "beta": dbeta},
        )
        assert result.max_rel_error < 1e-5


class TestSoftmax:

    def test_uniform(self):
        assert_allclose(softmax(np.zeros(4)), np.full(4, 0.25))

    def test_large_logits_do_not_overflow(self):
        p = softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(p))
        assert_allclose(p, [1.0, 0.0], atol=1e-12)

    @pytest.mark.parametrize("a,b", [(0.0, 0.0), (-5.0, 50.0), (3.0, -1.0)])
    def test_single_unmasked_entry(self, a, b):
        p = softmax(np.array([a, b]), np.array([True, False]))
        assert_array_equal(p, [1.0, 0.0])

    def test_all_masked_raises(self):
        with pytest.raises(InvalidMaskError):
            softmax(np.zeros(3), np.zeros(3, dtype=bool))

    def test_shift_invariance_and_normalization(self, gen):
        v = gen.normal(size=9)
        mask = gen.random(9) > 0.3
        mask[0] = True
        p = softmax(v, mask)
        assert p.min() >= 0.0
        assert p.sum() == pytest.approx(1.0, abs=1e-9)
        assert_array_equal(p[~mask], 0.0)
        assert_allclose(softmax(v + 17.5, mask), p, atol=1e-10)

    def test_backward_matches_finite_differences(self, gen):
        v, R = gen.normal(size=5), gen.normal(size=5)
        mask = np.array([True, True, False, True, True])
        p = softmax(v, mask)
        result = grad_check(
            lambda: float((softmax(v, mask) * R).sum()),
            {"v": v},
            {"v": softmax_backward(R, p)},
        )
        assert result.max_rel_error < 1e-6


class TestDropout:

    def test_eval_is_identity(self, gen):
        X = gen.normal(size=(4, 4))
        assert dropout(X, 0.5, Mode.EVAL, RngStream(1)) is X

    def test_zero_rate_is_identity(self, gen):
        X = gen.normal(size=(4, 4))
        assert_array_equal(dropout(X, 0.0, Mode.TRAIN, RngStream(1)), X)

    def test_survivor_fraction_and_mean(self):
        X = np.ones((200, 500))
        Y = dropout(X, 0.5, Mode.TRAIN, RngStream(11))
        survivors = np.count_nonzero(Y) / Y.size
        assert abs(survivors - 0.5) < 0.02
        assert Y.mean() == pytest.approx(1.0, abs=0.04)
        assert set(np.unique(Y)) == {0.0, 2.0}

    def test_same_stream_same_mask(self, gen):
        X = gen.normal(size=(8, 8))
        assert_array_equal(
            dropout(X, 0.3, Mode.TRAIN, RngStream(5, 2)),
            dropout(X, 0.3, Mode.TRAIN, RngStream(5, 2)),
        )

    def test_rate_out_of_range(self):
        with pytest.raises(ValueError):
            dropout(np.ones(3), 1.0, Mode.TRAIN, RngStream(0))


class TestAdam:

    def test_first_step_moves_by_lr(self):
        param = np.array([1.0, 1.0, 1.0])
        grad = np.array([3.0, -0.5, 100.0])
        adam_step(param, grad, AdamState.zeros_like(param), lr=0.01)
        assert_allclose(param - 1.0, -0.01 * np.sign(grad), atol=1e-6 * 0.01)

    def test_zero_grad_leaves_param(self):
        param = np.array([0.3, -2.0])
        adam_step(param, np.zeros(2), AdamState.zeros_like(param), lr=0.1)
        assert_array_equal(param, [0.3, -2.0])

    def test_converges_on_quadratic(self):
        x = np.array([5.0])
        state = AdamState.zeros_like(x)
        for _ in range(1000):
            adam_step(x, 2.0 * x, state, lr=0.1)
        assert abs(x[0]) < 0.01
        assert state.t == 1000

    def test_weight_decay_adds_l2_term(self):
        param = np.array([2.0])
        state = AdamState.zeros_like(param)
        adam_step(param, np.zeros(1), state, lr=0.1, weight_decay=0.5)
        assert param[0] < 2.0
        assert_allclose(state.m, [0.1 * 0.5 * 2.0])

    def test_deterministic(self, gen):
        grad = gen.normal(size=4)
        a, b = np.ones(4), np.ones(4)
        sa, sb = AdamState.zeros_like(a), AdamState.zeros_like(b)
        for _ in range(3):
            adam_step(a, grad, sa, lr=0.05, weight_decay=1e-4)
            adam_step(b, grad, sb, lr=0.05, weight_decay=1e-4)
        assert_array_equal(a, b)

    def test_non_finite_grad_names_tensor_and_step(self):
        param = np.zeros(2)
        with pytest.raises(NonFiniteError, match=r"hip\.0\.scb\.W1.*step 1"):
            adam_step(param, np.array([np.nan, 0.0]), AdamState.zeros_like(param), 0.1, name="hip.0.scb.W1")

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step(np.zeros(2), np.zeros(3), AdamState.zeros_like(np.zeros(2)), 0.1)


class TestGradCheck:

    def test_exact_quadratic(self, gen):
        x = gen.normal(size=(3, 3))
        result = grad_check(lambda: float((x ** 2).sum()), {"x": x}, {"x": 2 * x}, eps=1e-5)
        assert result.max_rel_error < 1e-9

    def test_sigmoid_chain(self, gen):
        w, x = gen.normal(size=4), gen.normal(size=4)
        s = sigmoid(w * x)
        result = grad_check(
            lambda: float(sigmoid(w * x).sum()),
            {"w": w},
            {"w": s * (1 - s) * x},
        )
        assert result.max_rel_error < 1e-6

    def test_reports_worst_coordinate(self):
        x = np.array([1.0, 2.0])
        wrong = np.array([2.0, 0.0])
        result = grad_check(lambda: float((x ** 2).sum()), {"x": x}, {"x": wrong})
        assert result.worst_tensor == "x"
        assert result.worst_index == (1,)
        assert result.max_rel_error == pytest.approx(1.0)

    def test_restores_parameters(self, gen):
        x = gen.normal(size=6)
        before = x.copy()
        grad_check(lambda: float(np.sin(x).sum()), {"x": x}, {"x": np.cos(x)})
        assert_array_equal(x, before)
