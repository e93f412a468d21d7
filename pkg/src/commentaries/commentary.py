"""Commentary families and the training losses they induce.

Each family is an immutable dataclass holding its parameters ``params``;
``with_params`` swaps in tape-attached parameters during meta-training.
Validation losses never use a commentary, except attention masks, which
are applied at train and test time alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .models import MlpSpec, forward, init_params, spatial_center, teacher_forward
from .params import ParamVector
from .tensor import (
    ShapeMismatchError,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    softmax_cross_entropy,
    squared_error,
)

__all__ = [
    "ExampleWeight",
    "Augmentation",
    "AttentionMask",
    "AuxTarget",
    "FreeParameters",
    "Commentary",
    "BlendedBatch",
    "one_hot",
    "cross_entropy",
    "weighted_loss",
    "blend_batch",
    "gaussian_mask",
    "apply_mask",
    "masked_loss",
    "aux_target_loss",
    "spatial_center",
    "shuffle_grid",
]


class ClassOutOfRangeError(ValueError):
    pass


@dataclass(frozen=True)
class ExampleWeight:
    """Teacher network t(x, i; phi) -> [0, 1] weighting each example's loss.

    ``constant`` pins every weight to a fixed value and ignores the teacher;
    ``constant=1`` is the no-commentary baseline.
    """

    teacher: MlpSpec
    params: ParamVector
    constant: float | None = None
    family = "example_weight"

    def __post_init__(self):
        if self.teacher.head != "sigmoid-scalar":
            raise ValueError("example-weight teacher needs a sigmoid-scalar head")

    @classmethod
    def create(cls, data_dim: int, hidden: int = 16, seed: int = 0) -> "ExampleWeight":
        spec = MlpSpec((data_dim + 1, hidden, 1), "relu", "sigmoid-scalar")
        return cls(spec, init_params(spec, seed))

    @classmethod
    def identity(cls, data_dim: int, hidden: int = 16) -> "ExampleWeight":
        return replace(cls.create(data_dim, hidden), constant=1.0)

    @property
    def is_identity(self) -> bool:
        return self.constant == 1.0

    def with_params(self, params: ParamVector) -> "ExampleWeight":
        return replace(self, params=params)

    def weights(self, inputs, iteration: int, total_iterations: int) -> Tensor:
        x = as_tensor(inputs)
        if self.constant is not None:
            return Tensor(np.full(x.shape[0], float(self.constant)))
        return teacher_forward(self.teacher, self.params, x, iteration, total_iterations)


@dataclass(frozen=True)
class Augmentation:
    """Label-pair blending grid; lambda[i, j] = 1 - 0.5 * sigmoid(phi[i, j])."""

    params: ParamVector
    family = "augmentation"

    def __post_init__(self):
        grid = self.params["grid"]
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise ValueError(f"augmentation grid must be square, got {grid.shape}")

    @classmethod
    def create(cls, num_classes: int) -> "Augmentation":
        return cls(ParamVector.from_arrays(["grid"], [np.zeros((num_classes, num_classes))]))

    @classmethod
    def identity(cls, num_classes: int) -> "Augmentation":
        # sigmoid(-inf) == 0 exactly, so every lambda is exactly 1
        return cls(ParamVector.from_arrays(["grid"], [np.full((num_classes, num_classes), -np.inf)]))

    @property
    def num_classes(self) -> int:
        return self.params["grid"].shape[0]

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.lambdas().value == 1.0))

    def with_params(self, params: ParamVector) -> "Augmentation":
        return replace(self, params=params)

    def lambdas(self) -> Tensor:
        return 1.0 - self.params["grid"].sigmoid() * 0.5


@dataclass(frozen=True)
class AttentionMask:
    """Network predicting a Gaussian mask centre per image (spatial-softmax head)."""

    net: MlpSpec
    params: ParamVector
    sigma: float
    height: int
    width: int
    channels: int = 1
    family = "attention_mask"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("mask sigma must be positive")
        if self.net.head != "spatial-center":
            raise ValueError("mask network needs a spatial-center head")
        if self.net.in_dim != self.channels * self.height * self.width:
            raise ValueError("mask network input width does not match the image size")

    @classmethod
    def create(
        cls,
        height: int,
        width: int,
        channels: int = 1,
        sigma: float | None = None,
        hidden: int = 32,
        grid: tuple[int, int] = (8, 8),
        seed: int = 0,
    ) -> "AttentionMask":
        spec = MlpSpec((channels * height * width, hidden, grid[0] * grid[1]), "relu", "spatial-center", grid)
        sigma = float(sigma) if sigma is not None else max(height, width) / 4.0
        return cls(spec, init_params(spec, seed), sigma, height, width, channels)

    @property
    def is_identity(self) -> bool:
        return math.isinf(self.sigma)

    def identity(self) -> "AttentionMask":
        return replace(self, sigma=math.inf)

    def with_params(self, params: ParamVector) -> "AttentionMask":
        return replace(self, params=params)

    def centers(self, inputs) -> Tensor:
        """Predicted mask centres in pixel coordinates, shape (B, 2)."""
        grid_center = forward(self.net, self.params, inputs)
        rows, cols = self.net.grid_shape
        scale = np.array([self.height / rows, self.width / cols])
        offset = 0.5 * scale - 0.5
        return grid_center * scale + offset


@dataclass(frozen=True)
class AuxTarget:
    """Network producing a bounded auxiliary regression target per example."""

    net: MlpSpec
    params: ParamVector
    target_dim: int
    aux_weight: float = 1.0
    family = "aux_target"

    def __post_init__(self):
        if self.target_dim < 1:
            raise ValueError("target_dim must be at least 1")
        if self.net.head != "bounded-vector" or self.net.out_dim != self.target_dim:
            raise ValueError("aux-target network needs a bounded-vector head of width target_dim")

    @classmethod
    def create(cls, data_dim: int, target_dim: int, hidden: int = 16, aux_weight: float = 1.0,
               seed: int = 0) -> "AuxTarget":
        spec = MlpSpec((data_dim, hidden, target_dim), "relu", "bounded-vector")
        return cls(spec, init_params(spec, seed), target_dim, aux_weight)

    @property
    def is_identity(self) -> bool:
        return self.aux_weight == 0.0

    def identity(self) -> "AuxTarget":
        return replace(self, aux_weight=0.0)

    def with_params(self, params: ParamVector) -> "AuxTarget":
        return replace(self, params=params)

    def targets(self, inputs) -> Tensor:
        return forward(self.net, self.params, inputs)


@dataclass(frozen=True)
class FreeParameters:
    """A bare parameter vector, for toy bilevel problems."""

    params: ParamVector
    family = "free"

    @classmethod
    def create(cls, values) -> "FreeParameters":
        return cls(ParamVector.from_arrays(["phi"], [np.atleast_1d(np.asarray(values, dtype=np.float64))]))

    @property
    def is_identity(self) -> bool:
        return False

    def with_params(self, params: ParamVector) -> "FreeParameters":
        return replace(self, params=params)


Commentary = Union[ExampleWeight, Augmentation, AttentionMask, AuxTarget, FreeParameters]


# ---------------------------------------------------------------------------
# losses


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ClassOutOfRangeError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _targets(targets, num_classes: int):
    if isinstance(targets, Tensor):
        return targets
    arr = np.asarray(targets)
    if arr.ndim == 1:
        return one_hot(arr, num_classes)
    return arr


def per_example_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Targets may be integer labels or rows of class probabilities."""
    return softmax_cross_entropy(logits, _targets(targets, logits.shape[1]))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    return per_example_cross_entropy(logits, targets).mean()


def weighted_loss(
    commentary: ExampleWeight,
    student_logits: Tensor,
    targets,
    inputs,
    iteration: int,
    total_iterations: int,
) -> Tensor:
    """mean_b( t(x_b, i; phi) * CE_b )."""
    losses = per_example_cross_entropy(student_logits, targets)
    w = commentary.weights(inputs, iteration, total_iterations)
    if w.shape != losses.shape:
        raise ShapeMismatchError(f"weights {w.shape} vs losses {losses.shape}")
    return (w * losses).mean()


@dataclass(frozen=True)
class BlendedBatch:
    inputs: Tensor
    targets: Tensor
    pairs: np.ndarray  # (B, 2) source labels
    lambdas: Tensor


def blend_batch(commentary: Augmentation, batch1, batch2=None, rng=None) -> BlendedBatch:
    """x_m = lam x1 + (1 - lam) x2 with lam read from the grid at (y1, y2).

    When ``batch2`` is omitted the partners are a permutation of ``batch1``
    drawn from ``rng``.
    """
    x1, y1 = np.asarray(batch1.inputs), np.asarray(batch1.labels)
    if batch2 is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        perm = rng.permutation(len(y1))
        x2, y2 = x1[perm], y1[perm]
    else:
        x2, y2 = np.asarray(batch2.inputs), np.asarray(batch2.labels)
    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise ShapeMismatchError("blended batches must have equal size")
    c = commentary.num_classes
    for y in (y1, y2):
        if y.size and (y.min() < 0 or y.max() >= c):
            raise ClassOutOfRangeError(f"labels outside [0, {c})")
    lam = commentary.lambdas()[y1, y2]
    b = len(y1)
    lam_col = lam.reshape(b, 1)
    lx = broadcast_to(lam_col, x1.shape)
    ly = broadcast_to(lam_col, (b, c))
    xm = lx * x1 + (1.0 - lx) * x2
    ym = ly * one_hot(y1, c) + (1.0 - ly) * one_hot(y2, c)
    return BlendedBatch(xm, ym, np.stack([y1, y2], axis=1), lam)


def shuffle_grid(commentary: Augmentation, rng) -> Augmentation:
    """Permute grid entries: destroys structure, keeps the multiset of lambdas."""
    grid = commentary.params["grid"].value
    flat = grid.ravel()[rng.permutation(grid.size)]
    return commentary.with_params(ParamVector.from_arrays(["grid"], [flat.reshape(grid.shape)]))


def gaussian_mask(center, sigma: float, height: int, width: int) -> Tensor:
    """exp(-((r - row)^2 + (c - col)^2) / (2 sigma^2)), peak 1 at the centre.

    ``center`` is a (row, col) pair, giving an (height, width) mask, or a
    (B, 2) tensor, giving (B, height, width).
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    c = as_tensor(center)
    single = c.ndim == 1
    if single:
        c = c.reshape(1, 2)
    if c.ndim != 2 or c.shape[1] != 2:
        raise ShapeMismatchError(f"centres must be (2,) or (B, 2), got {c.shape}")
    b = c.shape[0]
    rr, cc = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                         indexing="ij")
    n = height * width
    dr = rr.ravel() - broadcast_to(c[:, 0:1], (b, n))
    dc = cc.ravel() - broadcast_to(c[:, 1:2], (b, n))
    inv = 1.0 / (2.0 * sigma * sigma)
    mask = (-((dr * dr + dc * dc) * inv)).exp()
    return mask.reshape(height, width) if single else mask.reshape(b, height, width)


def apply_mask(commentary: AttentionMask, inputs) -> Tensor:
    """Multiply each image (all channels) by its predicted Gaussian mask."""
    x = as_tensor(inputs)
    if commentary.is_identity:
        return x
    b = x.shape[0]
    mask = gaussian_mask(commentary.centers(x), commentary.sigma, commentary.height, commentary.width)
    flat = mask.reshape(b, commentary.height * commentary.width)
    if commentary.channels > 1:
        flat = concat([flat] * commentary.channels, axis=1)
    return x * flat


def masked_loss(commentary: AttentionMask, student_spec: MlpSpec, student_params: ParamVector,
                inputs, targets) -> Tensor:
    """CE(n(x * m(x); theta), y); used for both training and validation."""
    logits = forward(student_spec, student_params, apply_mask(commentary, inputs))
    return cross_entropy(logits, targets)


def aux_target_loss(commentary: AuxTarget, student_logits: Tensor, predicted_targets: Tensor,
                    targets, inputs) -> Tensor:
    """aux_weight * mean_b ||t_hat - t(x; phi)||^2 + CE."""
    if predicted_targets.ndim != 2 or predicted_targets.shape[1] != commentary.target_dim:
        raise ShapeMismatchError(
            f"student aux head {predicted_targets.shape} does not match target_dim {commentary.target_dim}"
        )
    ce = cross_entropy(student_logits, targets)
    if commentary.aux_weight == 0.0:
        return ce
    aux = squared_error(predicted_targets, commentary.targets(inputs)).mean()
    return aux * commentary.aux_weight + ce
