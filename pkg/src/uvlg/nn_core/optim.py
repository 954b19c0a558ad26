"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    params: dict  # name -> Parameter
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))


def adamw_step(state: OptimizerState, lr: float, active=None) -> None:
    """One update of every trainable parameter in ``active`` (names; default all).

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    names = list(state.params) if active is None else [n for n in state.params if n in active]
    names = [n for n in names if state.params[n].trainable]
    missing = [n for n in names if state.params[n].grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for trainable parameter(s): {', '.join(missing)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for n in names:
        p = state.params[n]
        g = p.grad
        m, v = state.m[n], state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            upd = upd + state.weight_decay * p.data
        # in place: aliases of a tied parameter share this buffer
        p.data -= (lr * upd).astype(p.data.dtype, copy=False)


class AdamW:
    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.state = OptimizerState(dict(named_params), betas[0], betas[1], eps, weight_decay)

    def step(self, lr: float | None = None, active=None) -> None:
        adamw_step(self.state, self.lr if lr is None else lr, active=active)

    def zero_grad(self) -> None:
        for p in self.state.params.values():
            p.grad = None
