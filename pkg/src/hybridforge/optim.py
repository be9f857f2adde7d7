"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingError
from .tensor import Parameter

DEFAULT_LR = 1e-3
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment buffers for one parameter."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    hyper: tuple[float, float, float, float] = (DEFAULT_LR, *DEFAULT_BETAS, DEFAULT_EPS)


def adam_update(param: Parameter, state: AdamState) -> None:
    """One in-place Adam step on `param` from its populated grad."""
    g = param.grad
    if g is None:
        raise TrainingError(f"parameter {param.name!r} has no gradient")
    if not np.all(np.isfinite(g)):
        raise TrainingError(f"non-finite gradient for parameter {param.name!r}")
    lr, b1, b2, eps = state.hyper
    state.step_count += 1
    t = state.step_count
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * (g * g)
    m_hat = state.m / (1.0 - b1 ** t)
    v_hat = state.v / (1.0 - b2 ** t)
    param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.data.dtype, copy=False)


class Adam:
    """Adam over a list of Parameters; grads zeroed at step boundaries."""

    def __init__(self, params, lr: float = DEFAULT_LR,
                 betas: tuple[float, float] = DEFAULT_BETAS, eps: float = DEFAULT_EPS):
        self.params: list[Parameter] = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise TrainingError(f"duplicate parameter names: {sorted(names)}")
        self.states: dict[str, AdamState] = {
            p.name: AdamState(np.zeros_like(p.data), np.zeros_like(p.data),
                              hyper=(lr, betas[0], betas[1], eps))
            for p in self.params
        }

    def step(self) -> None:
        for p in self.params:
            adam_update(p, self.states[p.name])

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
