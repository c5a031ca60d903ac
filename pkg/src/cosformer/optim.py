"""
Bias-corrected Adam.

Frozen parameters are never touched: their moments are not allocated and
their values stay bitwise identical across steps.
"""

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .numerics import Parameter


@dataclass
class AdamState:
    """Moment accumulators and hyperparameters of one Adam run."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractViolation("Adam betas must lie in [0, 1)")
        if self.step < 0:
            raise ContractViolation("Adam step counter must be >= 0")


def adam_step(
    params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdamState
) -> None:
    """Apply one bias-corrected Adam update in place and advance the step.

    Moments are keyed by position in ``params``; callers must pass the same
    ordering on every step.
    """
    if len(params) != len(grads):
        raise ContractViolation(
            f"adam_step got {len(params)} parameters but {len(grads)} gradients"
        )
    state.step += 1
    bias1 = 1.0 - state.beta1**state.step
    bias2 = 1.0 - state.beta2**state.step
    for slot, (param, grad) in enumerate(zip(params, grads)):
        if grad.shape != param.data.shape:
            raise ContractViolation(
                f"gradient shape {grad.shape} does not match parameter "
                f"{param.name or slot} of shape {param.data.shape}"
            )
        if param.frozen:
            continue
        m = state.first_moment.get(slot)
        v = state.second_moment.get(slot)
        if m is None or m.shape != grad.shape:
            m = np.zeros_like(grad)
            v = np.zeros_like(grad)
        assert v is not None
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[slot] = m
        state.second_moment[slot] = v
        m_hat = m / bias1
        v_hat = v / bias2
        param.data = param.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Optimizer over a fixed, ordered list of parameters."""

    def __init__(self, params: Sequence[Parameter], learning_rate: float = 1e-3):
        self.params = list(params)
        self.state = AdamState(learning_rate=learning_rate)

    def step(self) -> None:
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params
        ]
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
