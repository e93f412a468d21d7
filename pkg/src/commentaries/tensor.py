"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

Forward values are computed eagerly. Every operation whose inputs live on a
:class:`Tape` is appended to that tape, and the backward rules are themselves
written in terms of tensor operations, so ``grad(..., create_graph=True)``
yields gradients that can be differentiated again (Hessian-vector products,
mixed partials, backpropagation through optimisation steps).

Implicit broadcasting in elementwise binary ops only prepends leading
dimensions (``(H,) + (B, H)``); anything else must go through an explicit
:func:`broadcast_to`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, logsumexp


class TensorError(ValueError):
    """Base class for engine errors."""


class ShapeMismatchError(TensorError):
    pass


class UnknownOpError(TensorError):
    pass


class NonScalarOutputError(TensorError):
    pass


class DetachedTensorError(TensorError):
    pass


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        raise TypeError("wrap arrays, not tensors; use as_tensor() or .detach()")
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def _freeze(value) -> np.ndarray:
    # op outputs are fresh (or read-only views), so no defensive copy
    if isinstance(value, np.ndarray) and value.dtype == np.float64:
        value.flags.writeable = False
        return value
    return _as_array(value)


class Tensor:
    """A dense float64 array, optionally registered as a node on a tape."""

    __slots__ = ("value", "tape", "node_id")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor method

    def __init__(self, value, tape: "Tape | None" = None, node_id: int | None = None):
        if isinstance(value, np.ndarray) and value.dtype == np.float64 and not value.flags.writeable:
            self.value = value
        else:
            self.value = _as_array(value)
        self.tape = tape
        self.node_id = node_id

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def on_tape(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        where = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    def __len__(self) -> int:
        return len(self.value)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return _binary("add", self, other)

    def __radd__(self, other):
        return _binary("add", other, self)

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", other, self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    def __rmul__(self, other):
        return _binary("mul", other, self)

    def __truediv__(self, other):
        return _binary("div", self, other)

    def __rtruediv__(self, other):
        return _binary("div", other, self)

    def __neg__(self):
        return record("neg", [self])

    def __matmul__(self, other):
        return record("matmul", [self, other])

    def __rmatmul__(self, other):
        return record("matmul", [other, self])

    def __getitem__(self, key):
        return record("slice", [self], key=_freeze_key(key))

    @property
    def T(self) -> "Tensor":
        return record("transpose", [self])

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return record("sum", [self], axis=_norm_axis(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return record("mean", [self], axis=_norm_axis(axis, self.ndim), keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record("reshape", [self], shape=tuple(int(s) for s in shape))

    def relu(self) -> "Tensor":
        return record("relu", [self])

    def sigmoid(self) -> "Tensor":
        return record("sigmoid", [self])

    def tanh(self) -> "Tensor":
        return record("tanh", [self])

    def exp(self) -> "Tensor":
        return record("exp", [self])

    def log(self) -> "Tensor":
        return record("log", [self])

    def sqrt(self) -> "Tensor":
        return record("sqrt", [self])

    def broadcast_to(self, shape) -> "Tensor":
        return broadcast_to(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    attrs: dict
    output: Tensor
    generation: int


class Tape:
    """Append-only record of operations. Node inputs always precede the node."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> Tensor:
        out = Tensor(value.value if isinstance(value, Tensor) else value, self, len(self.nodes))
        self.nodes.append(Node("leaf", (), {}, out, self.generation))
        return out

    def _append(self, kind: str, inputs: tuple[Tensor, ...], attrs: dict, value: np.ndarray) -> Tensor:
        out = Tensor(value, self, len(self.nodes))
        self.nodes.append(Node(kind, inputs, attrs, out, self.generation))
        return out

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the stored leaf values, in tape order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                values.append(node.output.value)
                continue
            args = [
                values[t.node_id] if t.tape is self else t.value
                for t in node.inputs
            ]
            values.append(_OPS[node.kind].forward(*args, **node.attrs))
        return values


# ---------------------------------------------------------------------------
# Op registry


@dataclass(frozen=True)
class OpDef:
    forward: Callable[..., np.ndarray]
    # backward(g, inputs, output, **attrs) -> one cotangent (or None) per input
    backward: Callable[..., list]
    arity: int = field(default=1)


_OPS: dict[str, OpDef] = {}


def _register(name: str, arity: int = 1):
    def deco(cls):
        _OPS[name] = OpDef(cls.forward, cls.backward, arity)
        return cls

    return deco


def _freeze_key(key):
    if not isinstance(key, tuple):
        key = (key,)
    out = []
    for k in key:
        if isinstance(k, (list, np.ndarray)):
            arr = np.asarray(k)
            if arr.dtype.kind not in "iub":
                raise TensorError("index arrays must be integer or boolean")
            out.append(arr.copy())
        else:
            out.append(k)
    return tuple(out)


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def _suffix(short: tuple, long: tuple) -> bool:
    return len(short) <= len(long) and tuple(long[len(long) - len(short):]) == tuple(short)


def _binary(kind: str, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        if _suffix(a.shape, b.shape):
            a = record("broadcast", [a], shape=b.shape)
        elif _suffix(b.shape, a.shape):
            b = record("broadcast", [b], shape=a.shape)
        else:
            raise ShapeMismatchError(f"{kind}: cannot broadcast {a.shape} with {b.shape}")
    return record(kind, [a, b])


def broadcast_to(x, shape) -> Tensor:
    """Explicit broadcast; expands leading dims and size-1 dims."""
    return record("broadcast", [x], shape=tuple(int(s) for s in shape))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise TensorError("concat of nothing")
    return record("concat", ts, axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    return record("log_softmax", [x], axis=axis % x.ndim)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Per-row ``-sum(targets * log_softmax(logits))``; targets are probabilities."""
    return record("softmax_cross_entropy", [logits, targets])


def squared_error(pred, target) -> Tensor:
    """Per-row sum of squared differences over the last axis."""
    return record("squared_error", [pred, target])


def stack_scalars(ts: Sequence[Tensor]) -> Tensor:
    return concat([as_tensor(t).reshape(1) for t in ts], axis=0)


def record(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate ``kind`` on ``inputs`` and register the result on their tape.

    Raises :class:`UnknownOpError` for unsupported kinds and
    :class:`ShapeMismatchError` for incompatible input shapes.
    """
    op = _OPS.get(kind)
    if op is None:
        raise UnknownOpError(f"unknown op kind {kind!r}")
    ins = tuple(as_tensor(x) for x in inputs)
    if op.arity and len(ins) != op.arity:
        raise TensorError(f"{kind} expects {op.arity} inputs, got {len(ins)}")
    value = _freeze(op.forward(*(t.value for t in ins), **attrs))
    tape = None
    for t in ins:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TensorError("inputs live on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    return tape._append(kind, ins, attrs, value)


# ---------------------------------------------------------------------------
# Op definitions. Backward rules use tensor ops so they can be taped.


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{kind}: shapes {a.shape} and {b.shape} differ")


@_register("add", 2)
class _Add:
    @staticmethod
    def forward(a, b):
        _same_shape("add", a, b)
        return a + b

    @staticmethod
    def backward(g, ins, out):
        return [g, g]


@_register("sub", 2)
class _Sub:
    @staticmethod
    def forward(a, b):
        _same_shape("sub", a, b)
        return a - b

    @staticmethod
    def backward(g, ins, out):
        return [g, -g]


@_register("mul", 2)
class _Mul:
    @staticmethod
    def forward(a, b):
        _same_shape("mul", a, b)
        return a * b

    @staticmethod
    def backward(g, ins, out):
        a, b = ins
        return [g * b, g * a]


@_register("div", 2)
class _Div:
    @staticmethod
    def forward(a, b):
        _same_shape("div", a, b)
        return a / b

    @staticmethod
    def backward(g, ins, out):
        a, b = ins
        gb = g / b
        return [gb, -(gb * out)]


@_register("neg")
class _Neg:
    @staticmethod
    def forward(a):
        return -a

    @staticmethod
    def backward(g, ins, out):
        return [-g]


@_register("matmul", 2)
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
        return a @ b

    @staticmethod
    def backward(g, ins, out):
        a, b = ins
        return [g @ b.T, a.T @ g]


@_register("transpose")
class _Transpose:
    @staticmethod
    def forward(a):
        if a.ndim != 2:
            raise ShapeMismatchError(f"transpose expects a matrix, got {a.shape}")
        return a.T

    @staticmethod
    def backward(g, ins, out):
        return [g.T]


@_register("relu")
class _Relu:
    @staticmethod
    def forward(a):
        return np.maximum(a, 0.0)

    @staticmethod
    def backward(g, ins, out):
        return [g * (ins[0].value > 0).astype(np.float64)]


@_register("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(a):
        return expit(a)

    @staticmethod
    def backward(g, ins, out):
        return [g * (out * (1.0 - out))]


@_register("tanh")
class _Tanh:
    @staticmethod
    def forward(a):
        return np.tanh(a)

    @staticmethod
    def backward(g, ins, out):
        return [g * (1.0 - out * out)]


@_register("exp")
class _Exp:
    @staticmethod
    def forward(a):
        return np.exp(a)

    @staticmethod
    def backward(g, ins, out):
        return [g * out]


@_register("log")
class _Log:
    @staticmethod
    def forward(a):
        return np.log(a)

    @staticmethod
    def backward(g, ins, out):
        return [g / ins[0]]


@_register("sqrt")
class _Sqrt:
    @staticmethod
    def forward(a):
        return np.sqrt(a)

    @staticmethod
    def backward(g, ins, out):
        # zero subgradient at sqrt(0) keeps differentiable Adam finite
        pos = (out.value > 0).astype(np.float64)
        if pos.all():
            return [g / (2.0 * out)]
        return [g * pos / (2.0 * (out + (1.0 - pos)))]


@_register("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(g, ins, out, axis=None, keepdims=False):
        shape = ins[0].shape
        if not keepdims:
            kshape = tuple(1 if (axis is None or i in axis) else s for i, s in enumerate(shape))
            g = g.reshape(kshape)
        return [broadcast_to(g, shape)]


@_register("mean")
class _Mean:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return np.mean(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(g, ins, out, axis=None, keepdims=False):
        shape = ins[0].shape
        count = int(np.prod(shape)) if axis is None else int(np.prod([shape[i] for i in axis]))
        (gs,) = _Sum.backward(g, ins, out, axis=axis, keepdims=keepdims)
        return [gs * (1.0 / count)]


@_register("broadcast")
class _Broadcast:
    @staticmethod
    def forward(a, shape):
        lead = len(shape) - a.ndim
        if lead < 0 or any(
            s != t and s != 1 for s, t in zip(a.shape, shape[lead:])
        ):
            raise ShapeMismatchError(f"cannot broadcast {a.shape} to {shape}")
        return np.broadcast_to(a, shape)

    @staticmethod
    def backward(g, ins, out, shape):
        src = ins[0].shape
        lead = len(shape) - len(src)
        axes = tuple(range(lead)) + tuple(
            lead + i for i, s in enumerate(src) if s == 1 and shape[lead + i] != 1
        )
        if axes:
            g = g.sum(axis=axes)
        if g.shape != src:
            g = g.reshape(src)
        return [g]


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(a, shape):
        if int(np.prod(shape)) != a.size:
            raise ShapeMismatchError(f"cannot reshape {a.shape} to {shape}")
        return a.reshape(shape)

    @staticmethod
    def backward(g, ins, out, shape):
        return [g.reshape(ins[0].shape)]


@_register("concat", 0)
class _Concat:
    @staticmethod
    def forward(*arrays, axis=0):
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise ShapeMismatchError(f"concat: {exc}") from None

    @staticmethod
    def backward(g, ins, out, axis=0):
        grads = []
        start = 0
        ax = axis % g.ndim
        for t in ins:
            stop = start + t.shape[ax]
            key = (slice(None),) * ax + (slice(start, stop),)
            grads.append(g[key])
            start = stop
        return grads


@_register("slice")
class _Slice:
    @staticmethod
    def forward(a, key):
        try:
            return np.array(a[key], dtype=np.float64)
        except IndexError as exc:
            raise ShapeMismatchError(f"slice: {exc}") from None

    @staticmethod
    def backward(g, ins, out, key):
        return [record("scatter", [g], key=key, shape=ins[0].shape)]


@_register("scatter")
class _Scatter:
    """Adjoint of ``slice``: add ``g`` into zeros of ``shape`` at ``key``."""

    @staticmethod
    def forward(g, key, shape):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return out

    @staticmethod
    def backward(g, ins, out, key, shape):
        return [g[key]]


@_register("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(a, axis=-1):
        return a - logsumexp(a, axis=axis, keepdims=True)

    @staticmethod
    def backward(g, ins, out, axis=-1):
        p = out.exp()
        gsum = g.sum(axis=axis, keepdims=True)
        return [g - p * broadcast_to(gsum, p.shape)]


@_register("softmax_cross_entropy", 2)
class _SoftmaxCrossEntropy:
    @staticmethod
    def forward(z, t):
        if z.ndim != 2 or z.shape != t.shape:
            raise ShapeMismatchError(f"softmax_cross_entropy: logits {z.shape}, targets {t.shape}")
        lsm = z - logsumexp(z, axis=1, keepdims=True)
        return -np.sum(t * lsm, axis=1)

    @staticmethod
    def backward(g, ins, out):
        z, t = ins
        lsm = log_softmax(z, axis=1)
        gcol = broadcast_to(g.reshape(g.shape[0], 1), z.shape)
        tsum = broadcast_to(t.sum(axis=1, keepdims=True), z.shape)
        gz = gcol * (lsm.exp() * tsum - t)
        gt = -(gcol * lsm)
        return [gz, gt]


@_register("squared_error", 2)
class _SquaredError:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape or a.ndim == 0:
            raise ShapeMismatchError(f"squared_error: {a.shape} vs {b.shape}")
        d = a - b
        return np.sum(d * d, axis=-1)

    @staticmethod
    def backward(g, ins, out):
        a, b = ins
        d = a - b
        if a.ndim == 1:
            gcol = broadcast_to(g, a.shape)
        else:
            gcol = broadcast_to(g.reshape(g.shape + (1,)), a.shape)
        ga = gcol * d * 2.0
        return [ga, -ga]


# ---------------------------------------------------------------------------
# Differentiation


def _zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape))


def vjp(
    outputs: Tensor,
    wrt: Sequence[Tensor],
    cotangent,
    create_graph: bool = False,
) -> list[Tensor]:
    """Return ``cotangent^T J`` for ``J = d outputs / d wrt``, one tensor per ``wrt``.

    With ``create_graph`` the returned tensors are recorded on the tape and
    can be differentiated again.
    """
    cot = as_tensor(cotangent)
    if cot.shape != outputs.shape:
        raise ShapeMismatchError(f"cotangent shape {cot.shape} != output shape {outputs.shape}")
    wrt = list(wrt)
    tape = outputs.tape
    for w in wrt:
        if not isinstance(w, Tensor) or w.tape is None:
            raise DetachedTensorError("differentiation target is not on a tape")
        if tape is not None and w.tape is not tape:
            raise DetachedTensorError("differentiation target lives on another tape")
    if tape is None or not wrt:
        return [_zeros_like(w) for w in wrt]

    wrt_ids = {w.node_id for w in wrt}
    lo = min(wrt_ids)
    top = outputs.node_id
    nodes = tape.nodes

    # forward sweep: which nodes depend on any target
    relevant = bytearray(top + 1)
    for i in wrt_ids:
        if i <= top:
            relevant[i] = 1
    for nid in range(lo, top + 1):
        if relevant[nid]:
            continue
        for inp in nodes[nid].inputs:
            if inp.tape is tape and inp.node_id >= lo and relevant[inp.node_id]:
                relevant[nid] = 1
                break
    if not relevant[top]:
        return [_zeros_like(w) for w in wrt]

    if not create_graph:
        cot = cot.detach()
    else:
        tape.generation += 1
    grads: dict[int, Tensor] = {top: cot}
    found: dict[int, Tensor] = {}
    try:
        for nid in range(top, lo - 1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            if nid in wrt_ids:
                found[nid] = g
            node = nodes[nid]
            if node.kind == "leaf":
                continue
            if create_graph:
                ins, out = node.inputs, node.output
            else:
                ins = tuple(Tensor(t.value) for t in node.inputs)
                out = Tensor(node.output.value)
            in_grads = _OPS[node.kind].backward(g, ins, out, **node.attrs)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or inp.tape is not tape:
                    continue
                j = inp.node_id
                if j < lo or not relevant[j]:
                    continue
                prev = grads.get(j)
                grads[j] = ig if prev is None else prev + ig
    finally:
        if create_graph:
            tape.generation -= 1
    return [found[w.node_id] if w.node_id in found else _zeros_like(w) for w in wrt]


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradient of a scalar ``output`` with respect to each tensor in ``wrt``."""
    if output.shape != ():
        raise NonScalarOutputError(f"grad needs a scalar output, got shape {output.shape}")
    return vjp(output, wrt, Tensor(1.0), create_graph=create_graph)


def dot(xs: Iterable[Tensor], ys: Iterable) -> Tensor:
    """Sum of elementwise products over paired tensors, as a scalar tensor."""
    total = None
    for x, y in zip(xs, ys):
        term = (as_tensor(x) * as_tensor(y)).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def hvp(loss: Tensor, params: Sequence[Tensor], vector: Sequence) -> list[Tensor]:
    """Hessian-vector product ``H v`` of a scalar loss, by double backward."""
    params = list(params)
    vector = [as_tensor(v) for v in vector]
    if len(vector) != len(params) or any(v.shape != p.shape for v, p in zip(vector, params)):
        raise ShapeMismatchError("hvp vector does not match parameter shapes")
    gs = grad(loss, params, create_graph=True)
    inner = dot(gs, [v.detach() for v in vector])
    if inner.tape is None:
        return [_zeros_like(p) for p in params]
    return grad(inner, params)
