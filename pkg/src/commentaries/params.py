"""Named, ordered collections of parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .tensor import ShapeMismatchError, Tape, Tensor


@dataclass(frozen=True)
class ParamVector:
    """Per-layer parameter tensors addressable by name, flattenable to one vector."""

    names: tuple[str, ...]
    tensors: tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.names) != len(self.tensors):
            raise ValueError("names and tensors differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate parameter names")

    @classmethod
    def from_arrays(cls, names: Sequence[str], arrays: Sequence) -> "ParamVector":
        return cls(tuple(names), tuple(Tensor(np.array(a, dtype=np.float64)) for a in arrays))

    @classmethod
    def empty(cls) -> "ParamVector":
        return cls((), ())

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors]

    @property
    def total_dim(self) -> int:
        return sum(t.size for t in self.tensors)

    def values(self) -> list[np.ndarray]:
        return [t.value for t in self.tensors]

    def flatten(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([t.value.ravel() for t in self.tensors])

    def unflatten(self, flat) -> "ParamVector":
        """Same layout as ``self`` filled from a flat vector (detached)."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_dim,):
            raise ShapeMismatchError(f"expected flat vector of {self.total_dim}, got {flat.shape}")
        out, start = [], 0
        for t in self.tensors:
            out.append(flat[start:start + t.size].reshape(t.shape).copy())
            start += t.size
        return ParamVector.from_arrays(self.names, out)

    def with_tensors(self, tensors: Sequence[Tensor]) -> "ParamVector":
        tensors = tuple(tensors)
        if [t.shape for t in tensors] != self.shapes:
            raise ShapeMismatchError("replacement tensors do not match parameter shapes")
        return ParamVector(self.names, tensors)

    def attach(self, tape: Tape) -> "ParamVector":
        """Register every tensor as a fresh leaf on ``tape``."""
        return ParamVector(self.names, tuple(tape.leaf(t.value) for t in self.tensors))

    def detach(self) -> "ParamVector":
        return ParamVector(self.names, tuple(t.detach() for t in self.tensors))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return self.with_tensors([a + b for a, b in zip(self.tensors, other.tensors)])

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return self.with_tensors([a - b for a, b in zip(self.tensors, other.tensors)])

    def scale(self, c: float) -> "ParamVector":
        return self.with_tensors([t * c for t in self.tensors])

    def zeros_like(self) -> "ParamVector":
        return ParamVector.from_arrays(self.names, [np.zeros(s) for s in self.shapes])

    def allclose(self, other: "ParamVector", **kw) -> bool:
        return self.names == other.names and all(
            np.allclose(a, b, **kw) for a, b in zip(self.values(), other.values())
        )

    def equal(self, other: "ParamVector") -> bool:
        return self.names == other.names and all(
            np.array_equal(a, b) for a, b in zip(self.values(), other.values())
        )
