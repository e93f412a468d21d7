"""Wiring between datasets, commentaries and the bilevel machinery.

``build_problem`` turns a dataset and a commentary into an
:class:`~commentaries.hypergrad.InnerProblem`; ``train_student`` trains a
fresh student with a frozen commentary and logs held-out metrics.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .commentary import (
    Augmentation,
    AttentionMask,
    AuxTarget,
    ExampleWeight,
    FreeParameters,
    apply_mask,
    aux_target_loss,
    blend_batch,
    cross_entropy,
    masked_loss,
    per_example_cross_entropy,
    weighted_loss,
)
from .data import Dataset, batch_sampler
from .hypergrad import InnerProblem, derive_seed
from .metrics import MetricsLog
from .models import MlpSpec, forward, init_params
from .optim import AdamConfig, SgdConfig, init_state, optimizer_step
from .params import ParamVector
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class InnerSettings:
    steps: int = 200
    batch_size: int = 10
    val_batch_size: int = 100
    optimizer: SgdConfig | AdamConfig = field(default_factory=lambda: AdamConfig(lr=1e-3))
    student_hidden: int = 32
    activation: str = "relu"
    memory_budget: float = 5e8
    steps_per_outer: int = 1
    # teacher iteration feature is min(i, horizon) / horizon
    horizon: int | None = None


def student_spec(dataset: Dataset, commentary, hidden: int, activation: str = "relu") -> MlpSpec:
    out = dataset.num_classes
    if isinstance(commentary, AuxTarget):
        out += commentary.target_dim
    return MlpSpec((dataset.feature_dim, hidden, out), activation, "logits")


def _logits(spec: MlpSpec, theta: ParamVector, x, num_classes: int) -> Tensor:
    out = forward(spec, theta, x)
    return out if spec.out_dim == num_classes else out[:, :num_classes]


def make_train_loss(dataset: Dataset, commentary, spec: MlpSpec, horizon: int):
    c = dataset.num_classes

    if isinstance(commentary, ExampleWeight):
        def loss(theta, phi, batch, step):
            com = commentary.with_params(phi)
            logits = forward(spec, theta, batch.inputs)
            return weighted_loss(com, logits, batch.labels, batch.inputs, min(step, horizon), horizon)
    elif isinstance(commentary, Augmentation):
        def loss(theta, phi, batches, step):
            b1, b2 = batches
            blended = blend_batch(commentary.with_params(phi), b1, b2)
            return cross_entropy(forward(spec, theta, blended.inputs), blended.targets)
    elif isinstance(commentary, AttentionMask):
        def loss(theta, phi, batch, step):
            return masked_loss(commentary.with_params(phi), spec, theta, batch.inputs, batch.labels)
    elif isinstance(commentary, AuxTarget):
        def loss(theta, phi, batch, step):
            out = forward(spec, theta, batch.inputs)
            return aux_target_loss(commentary.with_params(phi), out[:, :c], out[:, c:],
                                   batch.labels, batch.inputs)
    else:
        raise TypeError(f"no training loss for {type(commentary).__name__}")
    return loss


def make_val_loss(dataset: Dataset, commentary, spec: MlpSpec):
    c = dataset.num_classes
    if isinstance(commentary, AttentionMask):
        def loss(theta, phi, batch):
            return masked_loss(commentary.with_params(phi), spec, theta, batch.inputs, batch.labels)
    else:
        def loss(theta, phi, batch):
            return cross_entropy(_logits(spec, theta, batch.inputs, c), batch.labels)
    return loss


def make_train_batches(dataset: Dataset, commentary, batch_size: int):
    if isinstance(commentary, Augmentation):
        def batches(seed):
            return zip(batch_sampler(dataset, "train", batch_size, seed),
                       batch_sampler(dataset, "train", batch_size, derive_seed(seed, 2)))
    else:
        def batches(seed):
            return batch_sampler(dataset, "train", batch_size, seed)
    return batches


def build_problem(dataset: Dataset, commentary, settings: InnerSettings) -> InnerProblem:
    spec = student_spec(dataset, commentary, settings.student_hidden, settings.activation)
    horizon = settings.horizon or settings.steps
    val_bs = min(settings.val_batch_size, len(dataset.splits["validation"]))
    return InnerProblem(
        init_student=lambda seed: init_params(spec, seed),
        train_loss=make_train_loss(dataset, commentary, spec, horizon),
        val_loss=make_val_loss(dataset, commentary, spec),
        optimizer=settings.optimizer,
        n_steps=settings.steps,
        batch_size=settings.batch_size,
        train_batches=make_train_batches(dataset, commentary, settings.batch_size),
        val_batches=lambda seed: batch_sampler(dataset, "validation", val_bs, derive_seed(seed, 1)),
        memory_budget=settings.memory_budget,
        steps_per_outer=settings.steps_per_outer,
    )


def quadratic_problem(target: float, lr: float = 1.0, steps: int = 1, optimizer=None) -> InnerProblem:
    """L_T = 1/2 (theta - phi)^2, L_V = 1/2 (theta - target)^2, theta_0 = 0."""

    def train_loss(theta, phi, batch, step):
        d = theta["theta"] - phi["phi"]
        return (d * d).sum() * 0.5

    def val_loss(theta, phi, batch):
        d = theta["theta"] - target
        return (d * d).sum() * 0.5

    return InnerProblem(
        init_student=lambda seed: ParamVector.from_arrays(["theta"], [np.zeros(1)]),
        train_loss=train_loss,
        val_loss=val_loss,
        optimizer=optimizer or SgdConfig(lr),
        n_steps=steps,
    )


# ---------------------------------------------------------------------------
# evaluation


def evaluate(dataset: Dataset, commentary, spec: MlpSpec, theta: ParamVector, split: str) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) on a split; masks apply when present."""
    b = dataset.split(split)
    x = b.inputs
    if isinstance(commentary, AttentionMask):
        x = apply_mask(commentary, x)
    logits = _logits(spec, theta, x, dataset.num_classes)
    loss = float(per_example_cross_entropy(logits, b.labels).value.mean())
    acc = float(np.mean(np.argmax(logits.value, axis=1) == b.labels))
    return loss, acc


def train_student(
    dataset: Dataset,
    commentary,
    settings: InnerSettings,
    steps: int,
    seed: int,
    log_every: int = 25,
    metrics: MetricsLog | None = None,
    phase: str = "eval",
    eval_split: str = "test",
    batch_seed: int | None = None,
) -> tuple[ParamVector, list[float]]:
    """Train a fresh student with the commentary frozen.

    Every ``log_every`` steps (and at the end) logs the running training
    loss, validation loss and ``eval_split`` accuracy. Returns the final
    parameters and the per-step training losses.
    """
    problem = build_problem(dataset, commentary, settings)
    spec = student_spec(dataset, commentary, settings.student_hidden, settings.activation)
    theta = problem.init_student(seed)
    state = init_state(theta, problem.optimizer)
    phi = commentary.params
    batches = problem.train_batches(seed if batch_seed is None else batch_seed)
    losses: list[float] = []
    for step in range(1, steps + 1):
        tape = Tape()
        th = theta.attach(tape)
        loss = problem.train_loss(th, phi, next(batches), step - 1)
        if not np.isfinite(loss.value):
            raise FloatingPointError(f"training diverged at step {step}")
        losses.append(float(loss.value))
        theta, state = optimizer_step(th, state, loss, problem.optimizer)
        if metrics is not None and (step % log_every == 0 or step == steps):
            val, _ = evaluate(dataset, commentary, spec, theta, "validation")
            _, acc = evaluate(dataset, commentary, spec, theta, eval_split)
            window = losses[-log_every:]
            metrics.append(phase, step, seed, train_loss=float(np.mean(window)), val_loss=val, test_acc=acc)
    return theta, losses


def identity_of(commentary, dataset: Dataset):
    """The family's no-commentary configuration."""
    if isinstance(commentary, ExampleWeight):
        from dataclasses import replace

        return replace(commentary, constant=1.0)
    if isinstance(commentary, Augmentation):
        return Augmentation.identity(commentary.num_classes)
    if isinstance(commentary, (AttentionMask, AuxTarget)):
        return commentary.identity()
    if isinstance(commentary, FreeParameters):
        return commentary
    raise TypeError(type(commentary).__name__)


def example_weights(commentary: ExampleWeight, inputs: np.ndarray, iteration: int, horizon: int) -> np.ndarray:
    return commentary.weights(inputs, min(iteration, horizon), horizon).value.copy()


def take(iterator, n):
    return list(itertools.islice(iterator, n))
