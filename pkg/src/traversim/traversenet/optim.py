"""Bias-corrected ADAM as a pure function of (params, grads, state)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NetworkParams


@dataclass(frozen=True)
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: NetworkParams, **hyper) -> OptimState:
        m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.tensors.items()}
        v = {k: np.zeros_like(t, dtype=np.float64) for k, t in params.tensors.items()}
        return cls(m, v, 0, **hyper)


def adam_step(params: NetworkParams, grads: dict[str, np.ndarray], opt: OptimState) -> tuple[NetworkParams, OptimState]:
    if set(grads) != set(params.tensors):
        raise ValueError("gradient names do not match the parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
    step = opt.step + 1
    c1 = 1.0 - opt.beta1 ** step
    c2 = 1.0 - opt.beta2 ** step
    new_m, new_v, new_t = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads[name].astype(np.float64)
        m = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        new_m[name], new_v[name] = m, v
        update = opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        new_t[name] = (p - update).astype(p.dtype)
    state = OptimState(new_m, new_v, step, opt.lr, opt.beta1, opt.beta2, opt.eps)
    return NetworkParams(params.arch, new_t), state
