"""Adam optimizer over named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    alpha: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], alpha: float = 0.0005,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0, alpha=alpha, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState):
    """One Adam update; returns (new params, new state) without mutating inputs."""
    if set(params) != set(grads):
        raise ShapeError("parameter and gradient names do not match")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k]
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {params[k].shape} for {k}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[k] = params[k] - state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, AdamState(
        m=new_m, v=new_v, t=t, alpha=state.alpha, beta1=state.beta1,
        beta2=state.beta2, eps=state.eps,
    )
