"""Tensor and tape types for reverse-mode differentiation.

A :class:`Tensor` is a thin wrapper around a float64 ``numpy`` array. Tensors
created through :meth:`Tape.watch` are named leaves; every operation whose
inputs live on a tape appends a :class:`Node` to that tape. Tensors without a
tape are constants and operations on them run forward-only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "tape", "id")
    __array_priority__ = 100.0

    def __init__(self, data, tape: Tape | None = None, id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.id = id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node {self.id}"
        return f"Tensor(shape={self.shape}, {where})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; implementations live in ops
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
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    out_id: int
    backward: BackwardFn


@dataclass(eq=False)
class Tape:
    """Ordered record of executed operations."""

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[str, Tensor] = field(default_factory=dict)
    _count: int = 0

    def _new_id(self) -> int:
        self._count += 1
        return self._count

    def watch(self, name: str, value) -> Tensor:
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} already watched on this tape")
        t = Tensor(np.array(value, dtype=np.float64), self, self._new_id())
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"leaf {name!r} contains non-finite values")
        self.leaves[name] = t
        return t

    def watch_all(self, params: dict[str, np.ndarray], names=None) -> dict[str, Tensor]:
        """Watch ``names`` (default: all) and wrap the rest as constants."""
        names = set(params) if names is None else set(names)
        return {k: self.watch(k, v) if k in names else Tensor(v) for k, v in params.items()}

    def record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, backward: BackwardFn) -> None:
        out.tape = self
        out.id = self._new_id()
        self.nodes.append(Node(op, inputs, out.id, backward))


def backward(tape: Tape, loss: Tensor, retain_graph: bool = False) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``loss`` w.r.t. every watched leaf of ``tape``.

    Leaves that do not influence ``loss`` receive zeros. Unless
    ``retain_graph`` is set, recorded nodes are released as they are
    consumed, so intermediate activations are freed during the pass and the
    tape cannot be differentiated again.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    nodes = list(tape.nodes) if retain_graph else tape.nodes
    while nodes:
        node = nodes.pop()
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or inp.tape is not tape:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(leaf.id)
        out[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return out
