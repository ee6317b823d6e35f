"""Dense tensors with reverse-mode gradient recording.

A :class:`Tensor` wraps a row-major numpy array. Operations from
:mod:`mcae.numerics.ops` append a :class:`Node` to the active :class:`Tape`
whenever one of their inputs requires a gradient; :func:`backward` then walks
the tape in reverse and accumulates vector-Jacobian products.

    with Tape() as tape:
        loss = ops.sum(ops.sigmoid(x))
    backward(tape, loss)
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class OpKind(enum.Enum):
    MATMUL = "matmul"
    ADD = "add"
    SUB = "sub"
    MUL = "mul_elementwise"
    DIV = "div_elementwise"
    EXP = "exp"
    LOG = "log"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    GELU = "gelu"
    RELU = "relu"
    CLIP = "clip"
    MEAN = "mean"
    SUM = "sum"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    CONCAT = "concat"
    GATHER = "gather"
    SCATTER = "scatter"
    CONV_PATCH_EMBED = "conv_patch_embed"
    CONV_DEPTHWISE = "conv_depthwise"
    AFFINE_NORM = "affine_norm"


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation's rule."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class BackwardError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A dense array plus an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *perm):
        from . import ops
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return ops.transpose(self, perm)


@dataclass(eq=False)
class Node:
    kind: OpKind
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    attrs: dict[str, Any] = field(default_factory=dict)


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of operations; usable as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: dict[int, int] = {}

    def record(self, node: Node) -> None:
        self._produced[id(node.output)] = len(self.nodes)
        self.nodes.append(node)

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)


def current_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


class no_grad:
    """Suspend recording (e.g. for evaluation passes)."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf tensor that requires a gradient.

    Gradients accumulate additively into existing ``.grad`` arrays, so callers
    zero them between steps.
    """
    if loss.size != 1:
        raise BackwardError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise BackwardError("loss was not produced on this tape; run forward first")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise BackwardError(
                    f"{node.kind.value}: gradient shape {gi.shape} != input shape {inp.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not tape.produced(inp):
                leaves[key] = inp

    for key, t in leaves.items():
        g = grads[key].astype(t.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
