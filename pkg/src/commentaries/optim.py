"""Inner-loop optimisers whose updates can stay on the tape, plus a plain outer Adam."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .params import ParamVector
from .tensor import ShapeMismatchError, Tensor, grad


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 1e-3

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or not self.eps > 0:
            raise ValueError("learning rate and epsilon must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


@dataclass(frozen=True)
class OptState:
    step: int
    m: tuple | None = None
    v: tuple | None = None


def init_state(params: ParamVector, config) -> OptState:
    if isinstance(config, AdamConfig):
        zeros = tuple(Tensor(np.zeros(s)) for s in params.shapes)
        return OptState(0, zeros, zeros)
    return OptState(0)


def sgd_step(params: ParamVector, loss: Tensor, config: SgdConfig, differentiable: bool = False) -> ParamVector:
    """theta' = theta - lr * dloss/dtheta.

    With ``differentiable`` the result stays connected to everything upstream
    of ``loss``; otherwise detached values are returned.
    """
    grads = grad(loss, params.tensors, create_graph=differentiable)
    if differentiable:
        return params.with_tensors([p - g * config.lr for p, g in zip(params.tensors, grads)])
    return params.with_tensors(
        [Tensor(p.value - g.value * config.lr) for p, g in zip(params.tensors, grads)]
    )


def _adam_update(p, g, m, v, t: int, cfg: AdamConfig, sqrt):
    m = m * cfg.beta1 + g * (1.0 - cfg.beta1)
    v = v * cfg.beta2 + (g * g) * (1.0 - cfg.beta2)
    m_hat = m * (1.0 / (1.0 - cfg.beta1 ** t))
    v_hat = v * (1.0 / (1.0 - cfg.beta2 ** t))
    p = p - (m_hat * cfg.lr) / (sqrt(v_hat) + cfg.eps)
    return p, m, v


def adam_step(
    params: ParamVector,
    state: OptState,
    loss: Tensor,
    config: AdamConfig,
    differentiable: bool = False,
) -> tuple[ParamVector, OptState]:
    """One bias-corrected Adam step (epsilon outside the square root)."""
    if state.m is None or [m.shape for m in state.m] != params.shapes:
        raise ShapeMismatchError("optimizer state does not match parameters")
    grads = grad(loss, params.tensors, create_graph=differentiable)
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.tensors, grads, state.m, state.v):
        if differentiable:
            p2, m2, v2 = _adam_update(p, g, m, v, t, config, Tensor.sqrt)
        else:
            p2, m2, v2 = _adam_update(p.value, g.value, m.value, v.value, t, config, np.sqrt)
            p2, m2, v2 = Tensor(p2), Tensor(m2), Tensor(v2)
        new_p.append(p2)
        new_m.append(m2)
        new_v.append(v2)
    return params.with_tensors(new_p), OptState(t, tuple(new_m), tuple(new_v))


def optimizer_step(params, state, loss, config, differentiable=False):
    """Dispatch on the config type; returns (params, state)."""
    if isinstance(config, SgdConfig):
        return sgd_step(params, loss, config, differentiable), replace(state, step=state.step + 1)
    return adam_step(params, state, loss, config, differentiable)


@dataclass(frozen=True)
class OuterAdamState:
    step: int
    m: np.ndarray
    v: np.ndarray


def init_outer_state(dim: int) -> OuterAdamState:
    return OuterAdamState(0, np.zeros(dim), np.zeros(dim))


def outer_adam_step(
    params: ParamVector,
    hypergradient,
    state: OuterAdamState,
    config: AdamConfig,
) -> tuple[ParamVector, OuterAdamState]:
    """Plain numpy Adam update of commentary parameters from a flat hypergradient."""
    g = np.asarray(hypergradient.flatten() if isinstance(hypergradient, ParamVector) else hypergradient,
                   dtype=np.float64)
    if g.shape != (params.total_dim,) or state.m.shape != g.shape:
        raise ShapeMismatchError(
            f"hypergradient of size {g.size} does not match {params.total_dim} commentary parameters"
        )
    t = state.step + 1
    p, m, v = _adam_update(params.flatten(), g, state.m, state.v, t, config, np.sqrt)
    return params.unflatten(p), OuterAdamState(t, m, v)
