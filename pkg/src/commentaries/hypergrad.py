"""Hypergradients of a student's validation loss with respect to commentary parameters.

Two estimators:

* :func:`unrolled_hypergrad` trains a fresh student for ``n_steps`` with every
  update kept on the tape and backpropagates the validation loss through the
  whole trajectory (exact).
* :func:`ift_hypergrad` uses the implicit function theorem at the current
  student parameters, approximating the inverse Hessian with a truncated
  Neumann series (cheap, approximate).

:func:`meta_train` wraps either in an outer Adam loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator

import numpy as np

from .metrics import MetricsLog
from .optim import AdamConfig, SgdConfig, init_outer_state, init_state, optimizer_step, outer_adam_step
from .params import ParamVector
from .tensor import Tape, Tensor, dot, grad

log = logging.getLogger(__name__)


class HypergradError(RuntimeError):
    pass


class NonFiniteError(HypergradError):
    """Raised when a loss or series diverges; ``diagnostics`` holds what was seen."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MemoryBudgetError(HypergradError):
    pass


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _forever(value=None):
    while True:
        yield value


@dataclass
class InnerProblem:
    """The student's training problem, generic over the commentary family.

    ``train_loss(theta, phi, batch, step)`` is the adjusted loss and
    ``val_loss(theta, phi, batch)`` the validation loss (which depends on
    ``phi`` only for commentaries applied at test time). Batch streams are
    created from a seed, so every quantity is a deterministic function of
    (phi, seed).
    """

    init_student: Callable[[int], ParamVector]
    train_loss: Callable[[ParamVector, ParamVector, Any, int], Tensor]
    val_loss: Callable[[ParamVector, ParamVector, Any], Tensor]
    optimizer: SgdConfig | AdamConfig
    n_steps: int
    batch_size: int = 1
    train_batches: Callable[[int], Iterator] = lambda seed: _forever()
    val_batches: Callable[[int], Iterator] = lambda seed: _forever()
    memory_budget: float = 5e8
    steps_per_outer: int = 1

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.steps_per_outer < 1:
            raise ValueError("steps_per_outer must be at least 1")


@dataclass
class HypergradResult:
    hypergradient: ParamVector
    val_loss: float
    student_params: ParamVector
    train_losses: list[float] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def _check(value: Tensor, what: str, diagnostics: dict) -> float:
    v = float(value.value)
    if not math.isfinite(v):
        raise NonFiniteError(f"non-finite {what}: {v}", diagnostics)
    return v


def _flat(tensors) -> np.ndarray:
    return np.concatenate([t.value.ravel() for t in tensors]) if tensors else np.zeros(0)


def unrolled_hypergrad(problem: InnerProblem, phi: ParamVector, student_seed: int) -> HypergradResult:
    """Exact dL_V/dphi by backpropagating through ``n_steps`` of student training."""
    theta0 = problem.init_student(student_seed)
    footprint = problem.n_steps * problem.batch_size * theta0.total_dim
    if footprint > problem.memory_budget:
        raise MemoryBudgetError(
            f"unrolling {problem.n_steps} steps x batch {problem.batch_size} x {theta0.total_dim} "
            f"params = {footprint:.3g} exceeds budget {problem.memory_budget:.3g}"
        )
    tape = Tape()
    phi_t = phi.attach(tape)
    theta = theta0.attach(tape)
    state = init_state(theta, problem.optimizer)
    batches = problem.train_batches(student_seed)
    losses: list[float] = []
    diag: dict = {"train_losses": losses}
    for step in range(problem.n_steps):
        loss = problem.train_loss(theta, phi_t, next(batches), step)
        losses.append(_check(loss, f"training loss at step {step}", diag))
        theta, state = optimizer_step(theta, state, loss, problem.optimizer, differentiable=True)
    val = problem.val_loss(theta, phi_t, next(problem.val_batches(student_seed)))
    val_value = _check(val, "validation loss", diag)
    g = grad(val, phi_t.tensors)
    hyper = phi.unflatten(_flat(g))
    if not np.all(np.isfinite(hyper.flatten())):
        raise NonFiniteError("non-finite hypergradient", diag)
    diag["tape_nodes"] = len(tape)
    return HypergradResult(hyper, val_value, theta.detach(), losses, diag)


def neumann_inverse_hvp(hvp: Callable[[np.ndarray], np.ndarray], v, terms: int, alpha: float) -> np.ndarray:
    """alpha * sum_{j=0..terms} (I - alpha H)^j v, an approximation of H^{-1} v."""
    if terms < 0:
        raise ValueError("terms must be non-negative")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    v = np.array(v, dtype=np.float64)
    p = v.copy()
    for _ in range(terms):
        v = v - alpha * np.asarray(hvp(v), dtype=np.float64)
        p = p + v
        if not np.all(np.isfinite(p)):
            raise NonFiniteError("Neumann series diverged")
    out = alpha * p
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("Neumann series diverged")
    return out


def ift_hypergrad(
    problem: InnerProblem,
    phi: ParamVector,
    student_params: ParamVector,
    terms: int = 1,
    alpha: float | None = None,
    train_batch=None,
    val_batch=None,
    step: int = 0,
    seed: int = 0,
) -> HypergradResult:
    """Implicit-function-theorem hypergradient at ``student_params``.

    dL_V/dphi = direct - u^T d2L_T/(dtheta dphi^T), u ~= H^{-1} dL_V/dtheta,
    where ``direct`` is the explicit dependence of L_V on phi (non-zero only
    for commentaries used at evaluation time). Assumes ``student_params`` is
    close to stationary for L_T; the gradient norm there is reported in the
    diagnostics, not enforced.
    """
    alpha = problem.optimizer.lr if alpha is None else alpha
    if train_batch is None:
        train_batch = next(problem.train_batches(seed))
    if val_batch is None:
        val_batch = next(problem.val_batches(seed))
    tape = Tape()
    theta = student_params.attach(tape)
    phi_t = phi.attach(tape)
    diag: dict = {}
    lt = problem.train_loss(theta, phi_t, train_batch, step)
    train_value = _check(lt, "training loss", diag)
    g_theta = grad(lt, theta.tensors, create_graph=True)
    diag["train_grad_norm"] = float(np.linalg.norm(_flat(g_theta)))

    lv = problem.val_loss(theta, phi_t, val_batch)
    val_value = _check(lv, "validation loss", diag)
    gv = grad(lv, theta.tensors + phi_t.tensors)
    gv_theta = _flat(gv[: len(theta)])
    direct = _flat(gv[len(theta):])

    def hessian_vec(vec: np.ndarray) -> np.ndarray:
        parts = theta.unflatten(vec).tensors
        inner = dot(g_theta, parts)
        if inner.tape is None:
            return np.zeros_like(vec)
        return _flat(grad(inner, theta.tensors))

    u = neumann_inverse_hvp(hessian_vec, gv_theta, terms, alpha)
    inner = dot(g_theta, theta.unflatten(u).tensors)
    mixed = _flat(grad(inner, phi_t.tensors)) if inner.tape is not None else np.zeros(phi.total_dim)
    hyper = direct - mixed
    if not np.all(np.isfinite(hyper)):
        raise NonFiniteError("non-finite hypergradient", diag)
    return HypergradResult(phi.unflatten(hyper), val_value, student_params, [train_value], diag)


def meta_train(
    problem: InnerProblem,
    commentary,
    algorithm: str = "unrolled",
    meta_steps: int = 100,
    outer_config: AdamConfig = AdamConfig(lr=1e-3),
    seed: int = 0,
    terms: int = 1,
    alpha: float | None = None,
    metrics: MetricsLog | None = None,
    callback: Callable[[int, Any, HypergradResult], None] | None = None,
):
    """Optimise ``commentary.params`` to minimise the student's validation loss.

    ``unrolled`` re-initialises the student every meta-step; ``ift`` trains
    one student jointly, taking ``problem.steps_per_outer`` inner steps per
    commentary update. Returns ``(commentary, metrics)``.
    """
    if meta_steps < 1:
        raise ValueError("meta_steps must be at least 1")
    if algorithm not in ("unrolled", "ift"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    metrics = metrics if metrics is not None else MetricsLog()
    phi = commentary.params.detach()
    ostate = init_outer_state(phi.total_dim)

    if algorithm == "unrolled":
        for t in range(1, meta_steps + 1):
            res = unrolled_hypergrad(problem, phi, derive_seed(seed, t))
            phi, ostate = outer_adam_step(phi, res.hypergradient, ostate, outer_config)
            train = float(np.mean(res.train_losses)) if res.train_losses else math.nan
            metrics.append("meta", t, seed, train_loss=train, val_loss=res.val_loss)
            log.debug("meta step %d: val %.6g", t, res.val_loss)
            if callback is not None:
                callback(t, commentary.with_params(phi), res)
        return commentary.with_params(phi), metrics

    theta = problem.init_student(seed)
    state = init_state(theta, problem.optimizer)
    batches = problem.train_batches(seed)
    val_batches = problem.val_batches(derive_seed(seed, 1))
    inner_step = 0
    for t in range(1, meta_steps + 1):
        for _ in range(problem.steps_per_outer):
            batch = next(batches)
            tape = Tape()
            theta_t = theta.attach(tape)
            loss = problem.train_loss(theta_t, phi, batch, inner_step)
            _check(loss, f"training loss at step {inner_step}", {})
            theta, state = optimizer_step(theta_t, state, loss, problem.optimizer)
            inner_step += 1
        res = ift_hypergrad(problem, phi, theta, terms, alpha, batch, next(val_batches), inner_step - 1)
        phi, ostate = outer_adam_step(phi, res.hypergradient, ostate, outer_config)
        metrics.append("meta", t, seed, train_loss=res.train_losses[0], val_loss=res.val_loss)
        if callback is not None:
            callback(t, commentary.with_params(phi), res)
    return commentary.with_params(phi), metrics
