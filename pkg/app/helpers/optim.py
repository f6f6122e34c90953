from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

DECAY_MODES = ("linear", "inverse_time")


@dataclass
class AdamState:
    """Moments and schedule of an Adam optimizer, one moment pair per parameter."""
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)
    lr: float = 1e-5
    decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    decay_mode: str = "linear"
    step: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.decay_mode not in DECAY_MODES:
            raise ValueError(f"unknown decay mode '{self.decay_mode}'")

    @classmethod
    def for_params(cls, params: List[np.ndarray], **settings) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **settings,
        )

    def learning_rate(self, step: int) -> float:
        """Effective learning rate of the given (1-based) step."""
        elapsed = step - 1
        if self.decay_mode == "inverse_time":
            return self.lr / (1.0 + self.decay * elapsed)
        return max(0.0, self.lr - self.decay * elapsed)


def adam_step(params: List[np.ndarray], grads: List[np.ndarray],
              state: AdamState) -> Tuple[List[np.ndarray], AdamState]:
    """One bias-corrected Adam update.

    Returns fresh parameter arrays; ``state`` is advanced in place and returned.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and optimizer moments must line up")

    state.step += 1
    t = state.step
    lr_t = state.learning_rate(t)
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    updated = []
    for i, (param, grad) in enumerate(zip(params, grads)):
        if param.shape != grad.shape:
            raise ValueError(f"gradient {i} has shape {grad.shape}, parameter has {param.shape}")
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * grad
        state.second_moment[i] = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * grad ** 2
        m_hat = state.first_moment[i] / correction1
        v_hat = state.second_moment[i] / correction2
        updated.append(param - lr_t * m_hat / (np.sqrt(v_hat) + state.eps_adam))
    return updated, state
