"""ADAM with bias correction."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def init_for(self, params):
        self.first_moment = [np.zeros_like(p.data) for p in params]
        self.second_moment = [np.zeros_like(p.data) for p in params]
        self.step_count = 0
        return self


def adam_step(params, state, names=None):
    """Apply one ADAM update in place. Raises FloatingPointError on a NaN gradient."""
    if not state.first_moment:
        state.init_for(params)
    for i, p in enumerate(params):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            label = names[i] if names else (p.name or f"#{i}")
            raise FloatingPointError(
                f"non-finite gradient in parameter {label} (shape {p.shape}, step {state.step_count + 1})"
            )
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if p.grad is None:
            continue
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


def zero_grad(params):
    for p in params:
        p.grad = None
