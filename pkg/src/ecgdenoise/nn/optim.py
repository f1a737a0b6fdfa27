"""MSE loss and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import MutableMapping

import numpy as np

from ..errors import ValidationError
from .tensor import Tensor, _make, as_tensor


def mse_loss(pred: Tensor, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValidationError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    loss = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def bwd(g):
        d = (2.0 / n) * g * diff
        return d.astype(pred.dtype), (-d).astype(target.dtype)

    return _make(loss, (pred, target), bwd, "mse_loss")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: MutableMapping[str, np.ndarray], grads: MutableMapping[str, np.ndarray],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[MutableMapping[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, in place.

    A non-finite gradient rejects the whole step before anything is modified.
    """
    for name, g in grads.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValidationError(f"{name}: gradient shape {g.shape} != parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; Adam step rejected")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return params, state


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self, params, grads) -> None:
        adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
