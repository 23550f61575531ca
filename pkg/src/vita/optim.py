"""Decoupled-weight-decay Adam and gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators plus the shared schedule knobs.

    The step counter increases by exactly 1 per update; moment buffers
    always shape-match their parameters.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """One AdamW update with bias correction, in place.

    Weight decay is decoupled: p -= lr * wd * p, independent of the moments.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * update


class AdamW:
    """Stateful wrapper over adamw_step for a fixed parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.95), weight_decay=0.01, eps=1e-8):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], weight_decay=weight_decay, eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
