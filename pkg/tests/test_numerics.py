"""
Tests for the autodiff engine and numeric kernels.

Gradients of every primitive the model uses are checked against central
finite differences.
"""

import numpy as np
import pytest

from cosformer.errors import ContractViolation, NumericFault
from cosformer.numerics import (
    Parameter,
    Tape,
    Tensor,
    absolute,
    amax,
    concat,
    cross_entropy,
    exp,
    finite_difference_grad,
    layer_norm,
    log,
    max_relative_error,
    mean,
    mse,
    named_rng,
    no_grad,
    pinv_newton_schulz,
    pinv_residual,
    relu,
    softmax_rows,
    stack,
    sum_,
    transpose,
)


def check_gradient(loss_fn, param, tol=1e-6):
    param.zero_grad()
    loss_fn().backward()
    analytic = param.grad.copy()
    numeric = finite_difference_grad(loss_fn, param)
    # entries below 1e-3 are compared absolutely
    assert max_relative_error(analytic, numeric, floor=1e-3) < tol


class TestTensorBasics:
    """Graph construction and the backward sweep."""

    def test_ids_increase(self):
        a = Tensor([1.0])
        b = Tensor([2.0])
        assert b.id > a.id

    def test_tape_is_topological(self):
        w = Parameter(np.ones((2, 2)), "w")
        x = Tensor(np.eye(2))
        loss = sum_((x @ w) * (x @ w))
        tape = Tape.record(loss)
        ids = [e.output_id for e in tape.entries]
        assert ids == sorted(ids)
        assert ids[-1] == loss.id
        position = {e.output_id: i for i, e in enumerate(tape.entries)}
        for entry in tape.entries:
            for parent in entry.input_ids:
                if parent in position:
                    assert position[parent] < position[entry.output_id]

    def test_backward_requires_scalar(self):
        w = Parameter(np.ones((2, 2)))
        with pytest.raises(ContractViolation):
            (w * 2.0).backward()

    def test_gradients_accumulate(self):
        w = Parameter(np.array([1.0, 2.0]))
        sum_(w * w).backward()
        sum_(w * w).backward()
        assert np.allclose(w.grad, 2 * 2 * w.data)

    def test_zero_grad(self):
        w = Parameter(np.array([1.0, 2.0]))
        sum_(w).backward()
        w.zero_grad()
        assert np.all(w.grad == 0)

    def test_shared_subexpression_counted_once_per_use(self):
        w = Parameter(np.array([3.0]))
        y = w * w
        sum_(y + y).backward()
        assert np.allclose(w.grad, [12.0])

    def test_no_grad_builds_no_graph(self):
        w = Parameter(np.ones(3))
        with no_grad():
            y = w * 2.0
        assert not y.requires_grad
        assert y.is_leaf

    def test_non_finite_gradient_names_node(self):
        x = Parameter(np.array([1.0, 2.0]), "x")
        poisoned = Tensor(np.array([np.nan, 1.0]))
        loss = sum_(x * poisoned)
        with pytest.raises(NumericFault) as info:
            loss.backward()
        assert info.value.node_id is not None

    def test_parameter_assign_resizes(self):
        p = Parameter(np.zeros((2, 3)), "head")
        p.assign(np.ones((4, 3)))
        assert p.shape == (4, 3)
        assert p.grad.shape == (4, 3)

    def test_item_of_scalar(self):
        assert Tensor(3.5).item() == 3.5
        assert Tensor([[2.0]]).item() == 2.0

    def test_item_rejects_non_scalar(self):
        with pytest.raises(ContractViolation, match="single element"):
            Tensor([1.0, 2.0]).item()


    def test_named_rng_streams_are_independent_and_stable(self):
        a1 = named_rng(5, "data").normal(size=4)
        a2 = named_rng(5, "data").normal(size=4)
        b = named_rng(5, "shuffle").normal(size=4)
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b)


class TestPrimitiveGradients:
    """Finite-difference checks of every primitive."""

    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_affine_chain(self):
        x = Tensor(self.rng.normal(size=(3, 4)))
        w = Parameter(self.rng.normal(size=(4, 2)))
        b = Parameter(self.rng.normal(size=2))

        def loss():
            y = x @ w + b
            return sum_(y * y)

        check_gradient(loss, w)
        check_gradient(loss, b)

    def test_three_layer_perceptron(self):
        x = Tensor(self.rng.normal(size=(5, 4)))
        layers = [
            (Parameter(self.rng.normal(size=(4, 6))), Parameter(self.rng.normal(size=6))),
            (Parameter(self.rng.normal(size=(6, 6))), Parameter(self.rng.normal(size=6))),
            (Parameter(self.rng.normal(size=(6, 3))), Parameter(self.rng.normal(size=3))),
        ]

        def loss():
            h = x
            for i, (w, b) in enumerate(layers):
                h = h @ w + b
                if i < len(layers) - 1:
                    h = relu(h)
            return cross_entropy(h, [0, 1, 2, 0, 1])

        for w, b in layers:
            check_gradient(loss, w)
            check_gradient(loss, b)

    def test_elementwise(self):
        a = Parameter(self.rng.uniform(0.5, 2.0, size=(2, 3)))

        def loss():
            return sum_(exp(a) / (a + 1.0) - log(a) * a + a**3.0 - 2.0 / a)

        check_gradient(loss, a)

    def test_relu_and_abs_away_from_kinks(self):
        a = Parameter(np.array([[-1.5, 0.7], [2.0, -0.3]]))
        check_gradient(lambda: sum_(relu(a) * 3.0 + absolute(a)), a)

    def test_reductions(self):
        a = Parameter(self.rng.normal(size=(3, 4)))
        check_gradient(lambda: sum_(mean(a, axis=0) * sum_(a, axis=1, keepdims=True)), a)
        check_gradient(lambda: amax(sum_(absolute(a), axis=0)), a)
        check_gradient(lambda: sum_(amax(a, axis=1)), a)

    def test_indexing_transpose_concat(self):
        a = Parameter(self.rng.normal(size=(3, 4)))

        def loss():
            picked = a[:, 1:3]
            joined = concat([picked, transpose(transpose(a)[0:2, :])], axis=1)
            return sum_(joined * joined) + a[2, 3] * 4.0

        check_gradient(loss, a)

    def test_fancy_index_repeats_accumulate(self):
        a = Parameter(np.arange(4.0))
        sum_(a[np.array([0, 0, 3])]).backward()
        assert np.array_equal(a.grad, [2.0, 0.0, 0.0, 1.0])

    def test_stack(self):
        a = Parameter(self.rng.normal(size=3))
        b = Parameter(self.rng.normal(size=3))
        check_gradient(lambda: sum_(stack([a, b * 2.0]) ** 2.0), b)


class TestKernels:
    """Softmax, layer norm, cross-entropy and MSE."""

    def setup_method(self):
        self.rng = np.random.default_rng(1)

    def test_softmax_rows_sum_to_one(self):
        m = Tensor(self.rng.normal(size=(5, 7)) * 10)
        out = softmax_rows(m)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_mask_zeroes_entries(self):
        m = Tensor(self.rng.normal(size=(3, 3)))
        mask = np.triu(np.ones((3, 3), dtype=bool), k=1)
        out = softmax_rows(m, mask)
        assert np.all(out.data[mask] == 0.0)
        assert out.data[0, 0] == 1.0

    def test_softmax_rejects_full_row_mask(self):
        mask = np.array([[True, True], [False, True]])
        with pytest.raises(ContractViolation):
            softmax_rows(Tensor(np.zeros((2, 2))), mask)

    def test_softmax_rejects_non_finite_input(self):
        with pytest.raises(NumericFault):
            softmax_rows(Tensor(np.array([[np.inf, 0.0]])))

    def test_softmax_gradient(self):
        m = Parameter(self.rng.normal(size=(3, 4)))
        weights = Tensor(self.rng.normal(size=(3, 4)))
        mask = np.array([[False, True, False, False]] * 3)
        check_gradient(lambda: sum_(softmax_rows(m, mask) * weights), m)

    def test_layer_norm_statistics(self):
        x = Tensor(self.rng.normal(3.0, 2.0, size=(4, 6)))
        out = layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
        assert np.allclose(out.data.mean(axis=1), 0.0, atol=1e-12)
        assert np.allclose(out.data.var(axis=1), 1.0, atol=1e-4)

    def test_layer_norm_unit_variance_case(self):
        out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_layer_norm_gradients(self):
        x = Parameter(self.rng.normal(size=(3, 5)))
        gain = Parameter(self.rng.normal(size=5))
        bias = Parameter(self.rng.normal(size=5))
        weights = Tensor(self.rng.normal(size=(3, 5)))

        def loss():
            return sum_(layer_norm(x, gain, bias) * weights)

        check_gradient(loss, x, tol=1e-5)
        check_gradient(loss, gain)
        check_gradient(loss, bias)

    def test_cross_entropy_matches_log_softmax(self):
        logits = self.rng.normal(size=(3, 5))
        targets = [4, 0, 2]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -np.mean(log_probs[np.arange(3), targets])
        assert abs(cross_entropy(Tensor(logits), targets).item() - expected) < 1e-12

    def test_cross_entropy_gradient(self):
        logits = Parameter(self.rng.normal(size=(4, 6)))
        check_gradient(lambda: cross_entropy(logits * 2.0, [1, 5, 0, 0]), logits)

    def test_cross_entropy_needs_one_target_per_row(self):
        with pytest.raises(ContractViolation):
            cross_entropy(Tensor(np.zeros((2, 3))), [0])

    def test_mse(self):
        pred = Parameter(np.array([[1.0, 2.0], [3.0, 5.0]]))
        target = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert mse(pred, target).item() == pytest.approx((0 + 1 + 4 + 16) / 4)
        check_gradient(lambda: mse(pred, target), pred)


class TestPseudoInverse:
    """Newton-Schulz iteration."""

    def test_diagonally_dominant_softmax_matrices(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            logits = 4.0 * np.eye(n) + rng.normal(0.0, 0.5, size=(n, n))
            a = softmax_rows(Tensor(logits)).data
            z = pinv_newton_schulz(Tensor(a), iters=6).data
            assert pinv_residual(a, z) < 1e-4

    def test_general_softmax_matrices_with_more_iterations(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = softmax_rows(Tensor(rng.normal(size=(8, 8)))).data
            z = pinv_newton_schulz(Tensor(a), iters=40).data
            assert pinv_residual(a, z) < 1e-4

    def test_diagonal_matrix_after_six_iterations(self):
        z = pinv_newton_schulz(Tensor(np.diag([2.0, 4.0])), iters=6).data
        assert np.allclose(z, np.diag([0.5, 0.25]), atol=1e-6)

    def test_matches_numpy_on_invertible_matrix(self):
        a = np.array([[2.0, 0.5], [0.25, 1.0]])
        z = pinv_newton_schulz(Tensor(a), iters=20).data
        assert np.allclose(z, np.linalg.pinv(a), atol=1e-10)

    def test_requires_square(self):
        with pytest.raises(ContractViolation):
            pinv_newton_schulz(Tensor(np.ones((2, 3))))

    def test_gradient_through_unrolled_iteration(self):
        rng = np.random.default_rng(4)
        p = Parameter(3.0 * np.eye(3) + rng.normal(0.0, 0.3, size=(3, 3)))
        weights = Tensor(rng.normal(size=(3, 3)))

        def loss():
            return sum_(pinv_newton_schulz(softmax_rows(p), iters=4) * weights)

        check_gradient(loss, p, tol=1e-4)
