"""Adam optimiser over named parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name.

    Moments are created lazily on the first step and always mirror the
    parameter dims exactly.
    """

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(named_params: list[tuple[str, Tensor]], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Parameters with ``grad is None`` (never touched by the recorded ops)
    receive an exact zero gradient.  Non-finite gradients raise rather
    than silently corrupting the moments.
    """
    state.step += 1
    t = state.step
    b1, b2 = DTYPE(state.beta1), DTYPE(state.beta2)
    lr = DTYPE(state.learning_rate)
    eps = DTYPE(state.eps)
    c1 = DTYPE(1.0 - state.beta1**t)
    c2 = DTYPE(1.0 - state.beta2**t)
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam: gradient dims {g.shape} vs parameter dims {p.data.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam: non-finite gradient for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (DTYPE(1) - b1) * g
        v *= b2
        v += (DTYPE(1) - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
