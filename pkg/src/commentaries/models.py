"""Multilayer perceptrons used as students n(x; theta) and commentary networks t(.; phi)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import ParamVector
from .tensor import ShapeMismatchError, Tensor, as_tensor, broadcast_to, concat

HEADS = ("logits", "sigmoid-scalar", "bounded-vector", "spatial-center")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    """Dense network layout.

    ``grid`` gives the (rows, cols) layout of the final layer for the
    ``spatial-center`` head; when omitted the final width must be a square.
    """

    widths: tuple[int, ...]
    activation: str = "relu"
    head: str = "logits"
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"need at least two positive widths, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown output head {self.head!r}")
        if self.head == "sigmoid-scalar" and self.widths[-1] != 1:
            raise ValueError("sigmoid-scalar head needs final width 1")
        if self.head == "spatial-center":
            if self.widths[-1] < 4:
                raise ValueError("spatial-center head needs final width >= 4")
            rows, cols = self.grid_shape
            if rows * cols != self.widths[-1]:
                raise ValueError(f"grid {self.grid} does not match final width {self.widths[-1]}")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        if self.grid is not None:
            return self.grid
        side = math.isqrt(self.widths[-1])
        if side * side != self.widths[-1]:
            raise ValueError("spatial-center head without grid needs a square final width")
        return side, side

    @property
    def param_names(self) -> tuple[str, ...]:
        names = []
        for i in range(len(self.widths) - 1):
            names += [f"w{i}", f"b{i}"]
        return tuple(names)

    @property
    def total_dim(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    arrays = []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        arrays.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        arrays.append(np.zeros(fan_out))
    return ParamVector.from_arrays(spec.param_names, arrays)


def _trunk(spec: MlpSpec, params: ParamVector, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ShapeMismatchError(f"inputs {x.shape} do not match input width {spec.in_dim}")
    if params.shapes != [
        s for a, b in zip(spec.widths[:-1], spec.widths[1:]) for s in ((a, b), (b,))
    ]:
        raise ShapeMismatchError("parameters do not match the network layout")
    h = x
    ts = params.tensors
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        h = h @ ts[2 * i] + ts[2 * i + 1]
        if i < n_layers - 1:
            h = h.relu() if spec.activation == "relu" else h.tanh()
    return h


def forward(spec: MlpSpec, params: ParamVector, inputs) -> Tensor:
    """Per-example outputs.

    ``logits`` -> (B, out); ``sigmoid-scalar`` -> (B,) in (0, 1);
    ``bounded-vector`` -> (B, out) in (-1, 1); ``spatial-center`` -> (B, 2)
    expected (row, col) in grid coordinates.
    """
    x = as_tensor(inputs)
    h = _trunk(spec, params, x)
    if spec.head == "logits":
        return h
    if spec.head == "sigmoid-scalar":
        return h.sigmoid().reshape(x.shape[0])
    if spec.head == "bounded-vector":
        return h.tanh()
    rows, cols = spec.grid_shape
    return spatial_center(h.reshape(x.shape[0], rows, cols))


def teacher_forward(
    spec: MlpSpec, params: ParamVector, inputs, iteration: int, total_iterations: int
) -> Tensor:
    """Forward pass with ``iteration / total_iterations`` appended as an input feature."""
    x = as_tensor(inputs)
    if x.ndim != 2 or x.shape[1] + 1 != spec.in_dim:
        raise ShapeMismatchError(
            f"teacher expects data width {spec.in_dim - 1}, got inputs {x.shape}"
        )
    if total_iterations <= 0:
        raise ValueError("total_iterations must be positive")
    feature = np.full((x.shape[0], 1), iteration / total_iterations)
    return forward(spec, params, concat([x, feature], axis=1))


def _cell_coords(rows: int, cols: int) -> np.ndarray:
    r, c = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=1)


def spatial_center(logit_grid) -> Tensor:
    """Expected (row, col) under a softmax over grid cells.

    Accepts a single (h, w) grid, returning shape (2,), or a batch (B, h, w),
    returning (B, 2).
    """
    g = as_tensor(logit_grid)
    single = g.ndim == 2
    if single:
        g = g.reshape(1, *g.shape)
    if g.ndim != 3:
        raise ShapeMismatchError(f"expected (h, w) or (B, h, w) grid, got {g.shape}")
    b, rows, cols = g.shape
    flat = g.reshape(b, rows * cols)
    # the max shift is constant for differentiation; softmax is shift invariant
    shift = np.max(flat.value, axis=1, keepdims=True)
    e = (flat - broadcast_to(shift, flat.shape)).exp()
    p = e / broadcast_to(e.sum(axis=1, keepdims=True), e.shape)
    center = p @ _cell_coords(rows, cols)
    return center.reshape(2) if single else center
