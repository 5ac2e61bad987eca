"""Adam with bias correction over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .model import GradientStore, ModelParameters


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParameters, lr: float = 1e-3) -> "AdamState":
        return cls(
            lr=lr,
            m={n: np.zeros_like(a) for n, a in params.arrays.items()},
            v={n: np.zeros_like(a) for n, a in params.arrays.items()},
        )


def adam_step(params: ModelParameters, grads: GradientStore,
              state: AdamState) -> ModelParameters:
    """One Adam update in place; gradients are zeroed afterwards.

    A non-finite gradient aborts before any parameter is touched, so a bad
    batch can never half-apply.
    """
    for name, g in grads.grads.items():
        if not np.isfinite(g).all():
            raise ContractViolation(f"non-finite gradient for parameter '{name}'")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, a in params.arrays.items():
        g = grads.grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        params.arrays[name] = a - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    grads.zero()
    params.check_finite()
    return params
