"""Adam optimizer over named parameter dicts.

Purely functional: a step maps (params, grads, state) to fresh arrays, so a
training loop can rebind ``Tensor.data`` without aliasing surprises and a
checkpoint can capture optimizer state by value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import is_checked
from .errors import ContractError, DomainError


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        t=0,
    )


def adam_step(params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray],
              state: AdamState,
              lr: float,
              beta1: float = 0.9,
              beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; missing grads leave the param untouched."""
    if state.m.keys() != params.keys():
        raise ContractError("adam_step: state and params name different tensors")
    t = state.t + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p.copy()
            new_m[name] = state.m[name].copy()
            new_v[name] = state.v[name].copy()
            continue
        if g.shape != p.shape:
            raise ContractError(f"adam_step: grad shape {g.shape} for param "
                                f"{name!r} of shape {p.shape}")
        if is_checked() and not np.all(np.isfinite(g)):
            raise DomainError(f"adam_step: non-finite gradient for {name!r}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t)
