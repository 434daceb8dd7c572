"""Tensor, Parameter and the recording tape used for reverse-mode differentiation.

A computation is differentiated by running it inside a ``Tape`` context::

    with Tape() as tape:
        loss = ops.mean(ops.square(model(x) - y))
    grads = backward(tape, loss, store)

Every primitive in :mod:`agg.numerics.ops` appends one entry to the active tape
when at least one of its inputs requires a gradient. Because entries are
appended in execution order, walking the tape backwards visits nodes in
reverse topological order, each exactly once.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from agg.errors import ConfigurationError, TrainingDivergenceError

DEFAULT_DTYPE = np.float64


class Tensor:
    """A dense array plus the bookkeeping needed to take part in a tape."""

    __slots__ = ("value", "requires_grad", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, dtype=None):
        arr = np.asarray(value, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(DEFAULT_DTYPE)
        self.value = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the real work lives in ops.
    def __add__(self, other):
        from agg.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from agg.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from agg.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from agg.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from agg.numerics import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from agg.numerics import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from agg.numerics import ops
        return ops.index(self, key)


class Parameter(Tensor):
    """A named learnable tensor with a gradient slot of the same shape."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, value, dtype=None):
        super().__init__(np.array(value, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParameterStore:
    """Ordered, uniquely-named collection of parameters."""

    def __init__(self, params: Sequence[Parameter] = ()):
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        for p in params:
            self.add(p)

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ConfigurationError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def new(self, name: str, value, dtype=None) -> Parameter:
        return self.add(Parameter(name, value, dtype=dtype))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return int(sum(p.value.size for p in self))

    def zero_grad(self) -> None:
        for p in self:
            p.grad = np.zeros_like(p.value)

    def grads(self) -> dict[str, np.ndarray]:
        return {p.name: p.grad for p in self}

    def state(self) -> dict[str, np.ndarray]:
        """Copy of every parameter value, keyed by name."""
        return {p.name: p.value.copy() for p in self}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ConfigurationError(
                f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self._params.items():
            value = np.asarray(state[name])
            if value.shape != p.value.shape:
                raise ConfigurationError(
                    f"parameter {name!r}: shape {value.shape} does not match {p.value.shape}")
            p.value = value.astype(p.value.dtype, copy=True)


@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications, used as a context manager."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(op: str, output: Tensor, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Attach ``output`` to the active tape when any input needs a gradient."""
    tape = active_tape()
    if tape is None:
        return output
    if any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(TapeEntry(output, tuple(inputs), vjp, op))
    return output


def backward(tape: Tape, loss: Tensor, params: ParameterStore | Sequence[Parameter] | None = None,
             ) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape``; fill and return parameter gradients.

    Parameters that never took part in the computation receive zero gradients.
    """
    if loss.value.size != 1:
        raise ConfigurationError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.value)):
        raise TrainingDivergenceError("non-finite loss")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    seen_params: dict[int, Parameter] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        in_grads = entry.vjp(g)
        for inp, ig in zip(entry.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                seen_params[id(inp)] = inp
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig

    if params is None:
        targets = list(seen_params.values())
    else:
        targets = list(params)
    out: dict[str, np.ndarray] = {}
    for p in targets:
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=p.value.dtype).reshape(p.shape)
        out[p.name] = p.grad
    return out
