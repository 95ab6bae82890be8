"""Recording tape for reverse-mode differentiation.

Every primitive in :mod:`fmamba.numerics` funnels its result through
:func:`record`. When a :class:`Tape` is active and at least one input is
watched by it, a node holding the vector-Jacobian product is appended;
otherwise the result is a plain constant tensor and nothing is stored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []

#: names of every primitive that may appear on a tape
PRIMITIVES: dict[str, Callable] = {}


def primitive(fn: Callable) -> Callable:
    PRIMITIVES[fn.__name__] = fn
    return fn


class NonFiniteError(FloatingPointError):
    def __init__(self, where: str):
        super().__init__(f"non-finite value produced by {where}")
        self.where = where


class Tensor:
    """Dense float64 array, optionally watched by the active tape."""

    __slots__ = ("data", "_tape", "__weakref__")
    __array_ufunc__ = None  # numpy ufuncs on tensors would bypass the tape

    def __init__(self, data, _tape: Optional["Tape"] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ValueError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self._tape = _tape

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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        tracked = ", tracked" if self._tape is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    # arithmetic sugar; implementations live in numerics
    def __add__(self, other):
        from . import numerics
        return numerics.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import numerics
        return numerics.sub(self, other)

    def __rsub__(self, other):
        from . import numerics
        return numerics.sub(other, self)

    def __mul__(self, other):
        from . import numerics
        return numerics.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import numerics
        return numerics.div(self, other)

    def __rtruediv__(self, other):
        from . import numerics
        return numerics.div(other, self)

    def __neg__(self):
        from . import numerics
        return numerics.neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; tensors passed through :meth:`watch` become
    differentiable leaves.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []
        # closest approach of any abs/max argument to its kink
        self.kink_distance = math.inf

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def watch(self, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64, copy=True), _tape=self)
        self.leaves.append(t)
        return t

    def tracks(self, t) -> bool:
        return isinstance(t, Tensor) and t._tape is self

    def note_kink(self, distance: float) -> None:
        self.kink_distance = min(self.kink_distance, float(distance))

    def gradient(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        if output.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {}
        if self.tracks(output):
            grads[id(output)] = np.ones_like(output.data)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not self.tracks(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def record(name: str, out: np.ndarray, inputs: Sequence, vjp) -> Tensor:
    """Wrap a primitive's forward result, adding a tape node when needed."""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(name)
    tape = active_tape()
    if tape is not None and any(tape.tracks(x) for x in inputs):
        t = Tensor(out, _tape=tape)
        tape.nodes.append(Node(name, tuple(as_tensor(x) if not isinstance(x, Tensor) else x
                                           for x in inputs), t, vjp))
        return t
    return Tensor(out)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g
