"""Adam optimizer with bias-corrected moment estimates."""

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from pournet.exceptions import ShapeError


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers and the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Apply one Adam update to `params` in place and advance `state.t`.

    Moment buffers are float64 zeros created the first time a parameter name is seen.
    Every shape is checked before anything is touched, so a failed call leaves `params`
    and `state` unchanged.
    """
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"adam: no gradient for {name}", module="tensor")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad {g.shape} vs param {name} {p.shape}", module="tensor")
        if name in state.m and state.m[name].shape != p.shape:
            raise ShapeError(f"adam: moment {state.m[name].shape} vs param {name} {p.shape}",
                             module="tensor")

    beta1, beta2 = betas
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t

    for name, p in params.items():
        g = grads[name].astype(np.float64, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        m, v = state.m[name], state.v[name]

        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)

        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
