"""
Tests for Expert Consultation: router weights, the consult combination and
the projection of a bag into model space.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cosformer.errors import ContractViolation
from cosformer.model import (
    ExpertCommittee,
    consult,
    ec_project,
    ec_weights,
    expert_weights,
    patch_task_weights,
)
from cosformer.numerics import (
    Parameter,
    Tensor,
    finite_difference_grad,
    max_relative_error,
    sum_,
)


def committee_with(n_experts, d_f=4, d_model=3, seed=0):
    rng = np.random.default_rng(seed)
    committee = ExpertCommittee(d_f, d_model, 5, rng)
    for _ in range(n_experts):
        committee.add_expert(rng)
    for expert in committee.experts:
        expert.data = rng.normal(size=expert.shape)
    return committee


router_logits = st.integers(1, 5).flatmap(
    lambda n: st.integers(1, 4).flatmap(
        lambda t: arrays(np.float64, (n, t), elements=st.floats(-6.0, 6.0))
    )
)


class TestExpertWeights:
    """Router normalization, scaling and shifting."""

    def test_single_task_weight_is_one_plus_beta(self):
        committee = committee_with(1)
        z = np.random.default_rng(1).normal(size=(6, 4))
        w_bar = ec_weights(committee, z, 0, gamma=5.0, beta=1.0)
        assert np.allclose(w_bar.data, [2.0], atol=1e-12)

    def test_no_target_is_plain_softmax(self):
        w_bar = expert_weights(Tensor([[math.log(2.0), 0.0]]), None, gamma=5.0, beta=1.0)
        assert np.allclose(w_bar.data, [2 / 3, 1 / 3], atol=1e-12)

    def test_target_scaled_and_shifted(self):
        w_bar = expert_weights(Tensor([[1.0, 1.0]]), 0, gamma=5.0, beta=1.0)
        target = math.exp(5) / (math.exp(5) + math.exp(1))
        assert np.allclose(w_bar.data, [1.0 + target, 1.0 - target], atol=1e-12)
        assert w_bar.data[0] == pytest.approx(1.982, abs=1e-3)
        assert w_bar.data[1] == pytest.approx(0.018, abs=1e-3)

    def test_weights_average_over_patches(self):
        logits = Tensor([[math.log(3.0), 0.0], [0.0, math.log(3.0)]])
        w_bar = expert_weights(logits, None, 1.0, 0.0)
        assert np.allclose(w_bar.data, [0.5, 0.5], atol=1e-12)

    def test_literal_form(self):
        weights = patch_task_weights(Tensor([[1.0, 1.0]]), 0, 5.0, form="literal")
        denominator = math.exp(1) + 5.0
        assert np.allclose(
            weights.data, [[math.exp(5) / denominator, math.exp(1) / denominator]]
        )

    def test_target_out_of_range(self):
        with pytest.raises(ContractViolation):
            expert_weights(Tensor([[0.0, 0.0]]), 2, 5.0, 1.0)

    def test_router_needs_experts(self):
        committee = committee_with(0)
        with pytest.raises(ContractViolation):
            committee.router_logits(Tensor(np.ones((2, 4))))

    @given(router_logits, st.floats(0.1, 10.0), st.data())
    @settings(max_examples=60, deadline=None)
    def test_per_patch_weights_sum_to_one(self, logits, gamma, data):
        target = data.draw(st.integers(0, logits.shape[1] - 1))
        weights = patch_task_weights(Tensor(logits), target, gamma)
        assert np.all(np.abs(weights.data.sum(axis=1) - 1.0) < 1e-9)

    @given(router_logits, st.floats(0.1, 5.0), st.floats(0.0, 5.0), st.data())
    @settings(max_examples=60, deadline=None)
    def test_target_weight_grows_with_gamma(self, logits, gamma, extra, data):
        """Holds whenever the target's router logits are non-negative."""
        target = data.draw(st.integers(0, logits.shape[1] - 1))
        logits = logits.copy()
        logits[:, target] = np.abs(logits[:, target])
        low = expert_weights(Tensor(logits), target, gamma, 0.0).data[target]
        high = expert_weights(Tensor(logits), target, gamma + extra, 0.0).data[target]
        assert high >= low - 1e-12

    @given(router_logits, st.data())
    @settings(max_examples=60, deadline=None)
    def test_neutral_settings_ignore_target(self, logits, data):
        target = data.draw(st.integers(0, logits.shape[1] - 1))
        with_target = expert_weights(Tensor(logits), target, 1.0, 0.0)
        without = expert_weights(Tensor(logits), None, 1.0, 0.0)
        assert np.array_equal(with_target.data, without.data)


class TestConsult:
    def test_zero_experts_returns_general(self):
        committee = committee_with(0)
        assert consult(committee, None) is committee.general

    def test_scalar_combination(self):
        committee = committee_with(1, d_f=2, d_model=2)
        committee.general.data = np.eye(2)
        committee.experts[0].data = np.eye(2)
        theta = consult(committee, np.array([0.5]))
        assert np.array_equal(theta.data, 1.5 * np.eye(2))

    def test_linear_in_weights(self):
        committee = committee_with(3)
        w_bar = np.array([0.2, 1.3, -0.4])
        base = committee.general.data
        once = consult(committee, w_bar).data - base
        scaled = consult(committee, 2.5 * w_bar).data - base
        assert np.allclose(scaled, 2.5 * once, atol=1e-12)

    def test_weight_count_must_match(self):
        committee = committee_with(2)
        with pytest.raises(ContractViolation):
            consult(committee, np.array([1.0]))


class TestProjection:
    def test_shape(self):
        committee = committee_with(2)
        z = np.random.default_rng(2).normal(size=(7, 4))
        assert ec_project(committee, z, 1, 5.0, 1.0).shape == (7, 3)

    def test_identity_general_without_experts(self):
        committee = committee_with(0, d_f=3, d_model=3)
        committee.general.data = np.eye(3)
        z = np.random.default_rng(3).normal(size=(4, 3))
        assert np.array_equal(ec_project(committee, z, None, 1.0, 0.0).data, z)

    def test_matches_independently_assembled_projection(self):
        committee = committee_with(3)
        z = np.random.default_rng(4).normal(size=(5, 4))

        hidden = np.maximum(z @ committee.fc1_weight.data + committee.fc1_bias.data, 0.0)
        logits = np.hstack(
            [hidden @ r.data + b.data for r, b in zip(committee.router_rows, committee.router_biases)]
        )
        logits[:, 1] *= 5.0
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        w_bar = (e / e.sum(axis=1, keepdims=True)).mean(axis=0)
        w_bar[1] += 1.0
        theta = committee.general.data + sum(w * x.data for w, x in zip(w_bar, committee.experts))

        assert np.allclose(ec_project(committee, z, 1, 5.0, 1.0).data, z @ theta, atol=1e-12)

    def test_rejects_empty_bag(self):
        with pytest.raises(ContractViolation):
            ec_project(committee_with(1), np.zeros((0, 4)), 0, 5.0, 1.0)

    def test_rejects_feature_width_mismatch(self):
        with pytest.raises(ContractViolation):
            ec_project(committee_with(1), np.zeros((2, 5)), 0, 5.0, 1.0)

    def test_gradients(self):
        committee = committee_with(2)
        z = np.random.default_rng(5).normal(size=(4, 4))
        weights = Tensor(np.random.default_rng(6).normal(size=(4, 3)))

        def loss():
            return sum_(ec_project(committee, z, 0, 5.0, 1.0) * weights)

        for param in [committee.general, committee.experts[1], committee.fc1_weight]:
            param.zero_grad()
            loss().backward()
            numeric = finite_difference_grad(loss, param)
            assert max_relative_error(param.grad, numeric, floor=1e-3) < 1e-5


class TestCommitteeGrowth:
    def test_new_expert_is_zero(self):
        committee = committee_with(0)
        committee.add_expert(np.random.default_rng(0))
        assert np.all(committee.experts[0].data == 0.0)
        assert committee.router_rows[0].shape == (5, 1)
        assert np.all(np.abs(committee.router_rows[0].data) <= 1e-2)

    def test_freeze_before(self):
        committee = committee_with(3)
        committee.freeze_before(2)
        assert [e.frozen for e in committee.experts] == [True, True, False]
        assert [r.frozen for r in committee.router_rows] == [True, True, False]
        assert not committee.general.frozen
        assert not committee.fc1_weight.frozen

    def test_parameters_include_every_expert(self):
        committee = committee_with(2)
        names = {p.name for p in committee.parameters()}
        assert {"ec.general", "ec.expert.0", "ec.expert.1", "ec.router.fc2.1"} <= names
        assert all(isinstance(p, Parameter) for p in committee.parameters())
