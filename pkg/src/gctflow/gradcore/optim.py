from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import OptimizerError
from .tensor import Tensor


@dataclass
class AdamState:
    learning_rate: float = 5e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise OptimizerError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.epsilon <= 0 or self.learning_rate <= 0 or self.weight_decay < 0:
            raise OptimizerError("epsilon and learning_rate must be positive, weight_decay non-negative")


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is decoupled: ``p -= lr * wd * p`` happens before the adaptive
    step and never enters the moment estimates.
    """
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(state.m) != len(params):
        raise OptimizerError(f"state tracks {len(state.m)} parameters, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise OptimizerError(f"parameter {p.name or i!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr = state.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise OptimizerError("a parameter was registered twice")
        self.state = AdamState(lr, weight_decay, betas[0], betas[1], eps)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
