"""Reverse-mode recording of primitive ops.

Every differentiable kernel in :mod:`agfusion.tensor_core` checks for an
active :class:`Tape` and, if one is present, appends a node holding its
inputs, its output and a closure mapping the output gradient to input
gradients. :meth:`Tape.backward` replays the nodes in exact reverse order.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "agfusion_tape", default=None
)
# (op name, factor): that op's backward output is scaled, for harness self-tests
_FAULT: contextvars.ContextVar[tuple[str, float] | None] = contextvars.ContextVar(
    "agfusion_fault", default=None
)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: object
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Gradients:
    """Mapping from tensors to accumulated gradient arrays.

    Tensors the loss does not depend on map to zeros of the right shape.
    """

    def __init__(self, grads: dict[int, np.ndarray], keep: dict[int, object]):
        self._grads = grads
        self._keep = keep

    def __getitem__(self, tensor) -> np.ndarray:
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros(tensor.shape)
        return g

    def __contains__(self, tensor) -> bool:
        return id(tensor) in self._grads


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; ops executed inside the block are recorded::

        with Tape() as tape:
            y = relu(x)
        grads = tape.backward(sum_all(y))
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs, output, backward) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, output, seed: np.ndarray | None = None) -> Gradients:
        if not self.nodes:
            raise ContractError("backward called on an empty tape")
        if seed is None:
            seed = np.ones(output.shape)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != tuple(output.shape):
            raise ContractError(
                f"seed shape {seed.shape} does not match output {tuple(output.shape)}"
            )
        grads: dict[int, np.ndarray] = {id(output): seed.copy()}
        keep: dict[int, object] = {id(output): output}
        fault = _FAULT.get()
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not hasattr(inp, "data"):
                    continue
                if fault is not None and node.op == fault[0]:
                    gi = gi * fault[1]
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.array(gi, dtype=np.float64)
                    keep[key] = inp
        return Gradients(grads, keep)


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def no_tape():
    """Context manager that suspends recording (for evaluation passes)."""
    return _Suspend()


class _Suspend:
    def __enter__(self):
        self._token = _ACTIVE.set(None)

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)


class inject_fault:
    """Scale the backward of every ``op`` node by ``factor`` inside the block."""

    def __init__(self, op: str, factor: float):
        self.op, self.factor = op, float(factor)

    def __enter__(self):
        self._token = _FAULT.set((self.op, self.factor))
        return self

    def __exit__(self, *exc):
        _FAULT.reset(self._token)
