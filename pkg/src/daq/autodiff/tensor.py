"""Dense tensor with a reverse-mode gradient tape.

Each op output carries a :class:`TapeNode` recording its inputs and a backward
rule.  :func:`backward` sorts the reachable graph topologically and sweeps it in
reverse, summing contributions on fan-out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Incompatible shapes passed to an op."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


@dataclass
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    """Row-major real array plus gradient bookkeeping.

    Construction always copies ``data`` so no two tensors share storage.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.array(data, dtype=DTYPES.get(dtype, dtype), copy=True)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, node: TapeNode) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(t.requires_grad for t in node.inputs)
        out.node = node if out.requires_grad else None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic lives in ops; these are thin hooks
    def __add__(self, other):
        from daq.autodiff import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from daq.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from daq.autodiff import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from daq.autodiff import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from daq.autodiff import ops

        return ops.mul(self, -1.0)

    def sum(self):
        from daq.autodiff import ops

        return ops.sum(self)


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map from every reachable tensor that requires grad to its
    gradient; leaves also get ``.grad`` set (overwritten, not accumulated).
    Tensors in ``params`` that the loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _topological(loss)
    by_id = {id(t): t for t in order}
    for t in reversed(order):
        g = grads.get(id(t))
        if g is None or t.node is None:
            continue
        parent_grads = t.node.backward(g)
        for parent, pg in zip(t.node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
    result: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = by_id[key]
        if t.requires_grad:
            result[t] = g
            if t.node is None:
                t.grad = g
    for p in params:
        if p not in result:
            p.grad = np.zeros_like(p.data)
            result[p] = p.grad
    return result
