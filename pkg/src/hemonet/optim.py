"""Adam with bias correction and staircase exponential learning-rate decay.

The effective learning rate is ``base_lr * decay_rate ** (step // decay_period)``:
non-increasing in the step counter and equal to ``base_lr`` at step 0.  The
staircase (integer division) form makes schedules bit-exactly testable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericalError, Tensor


@dataclass
class AdamState:
    """Optimizer state; moment buffers are keyed by parameter name."""

    base_lr: float = 1e-4
    decay_rate: float = 0.96
    decay_period: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.decay_period < 1:
            raise ValueError(f"decay_period must be a positive integer, got {self.decay_period}")
        if self.step < 0:
            raise ValueError(f"step must be non-negative, got {self.step}")

    def effective_lr(self) -> float:
        return self.base_lr * self.decay_rate ** (self.step // self.decay_period)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> None:
    """Apply one Adam update in place to every parameter named in ``grads``.

    Rejects the whole step without touching parameters or state if any
    gradient contains NaN/Inf.  Deterministic: identical inputs produce
    bitwise-identical parameters and state.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {params[name].data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}; step rejected")

    lr = state.effective_lr()
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name].data
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)).astype(p.dtype, copy=False)
    state.step = t
