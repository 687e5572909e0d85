"""Adam with decoupled-from-nothing classic L2 weight decay and gradient clipping.

The decay term is added to the raw gradient before the moment updates
(the original Adam formulation), not applied to the weights afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the shared step count."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def moments_for(self, name: str, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
        return self.m[name], self.v[name]


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return float(np.sqrt(total))


def clip_grads(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint euclidean norm is at most max_norm.

    Returns the pre-clip norm.
    """
    if max_norm <= 0.0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(params)
    if not np.isfinite(norm):
        raise NumericError("gradient norm is not finite", diagnostics={"norm": norm})
    if norm > max_norm:
        factor = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= factor
    return norm


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Parameters whose grad is None (detached branches this step) are skipped
    entirely so their moments do not decay spuriously.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * p.data
        m, v = state.moments_for(name, p.shape)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if not np.all(np.isfinite(p.data)):
            raise NumericError(
                f"parameter '{name}' became non-finite after update",
                diagnostics={"step": t, "param": name},
            )
