"""Adam updates and L2 regularization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import NumericalError, is_bias


@dataclass
class RegConfig:
    beta_kernel: float = 0.0  # conv kernels and FC weights
    beta_bias: float = 0.0

    def __post_init__(self):
        if self.beta_kernel < 0 or self.beta_bias < 0:
            raise ValueError(f"regularization coefficients must be >= 0: {self}")


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def l2_penalty(model, reg: RegConfig):
    """``beta_kernel * sum(w**2)/2 + beta_bias * sum(b**2)/2`` and its gradient."""
    params = getattr(model, "params", model)
    penalty = 0.0
    grads = {}
    for name, p in params.items():
        beta = reg.beta_bias if is_bias(name) else reg.beta_kernel
        penalty += 0.5 * beta * float(np.sum(p.astype(np.float64) ** 2))
        grads[name] = (beta * p).astype(p.dtype)
    return penalty, grads


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params):
        raise ValueError(f"gradient names do not match parameters: {sorted(set(grads) ^ set(params))}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        p -= step
    return params, state


def expand_state_head(state: AdamState, params: dict) -> AdamState:
    """Pad output-layer moments with zeros to match an expanded head."""
    for name in ("out.weights", "out.bias"):
        target = params[name]
        for moments in (state.m, state.v):
            old = moments[name]
            grown = np.zeros_like(target)
            grown[tuple(slice(0, s) for s in old.shape)] = old
            moments[name] = grown
    return state
