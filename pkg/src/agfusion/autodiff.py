"""Gradient bookkeeping on top of the tape: parameter store, gradcheck, AdamW."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError
from .tape import Gradients, Tape, no_tape
from .tensor_core import Tensor, extended_precision, sum_all, weighted_sum

__all__ = [
    "Tape",
    "Gradients",
    "ParamStore",
    "OptimConfig",
    "GradcheckReport",
    "named_tensors",
    "backward",
    "gradcheck",
    "adam_step",
    "cosine_lr",
]


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Walk dataclasses, lists and dicts collecting every Tensor by dotted path."""
    found: dict[str, Tensor] = {}

    def walk(x, path):
        if isinstance(x, Tensor):
            found[path] = x
        elif dataclasses.is_dataclass(x) and not isinstance(x, type):
            for f in dataclasses.fields(x):
                walk(getattr(x, f.name), f"{path}.{f.name}" if path else f.name)
        elif isinstance(x, (list, tuple)):
            for i, item in enumerate(x):
                walk(item, f"{path}.{i}" if path else str(i))
        elif isinstance(x, dict):
            for k in sorted(x):
                walk(x[k], f"{path}.{k}" if path else str(k))

    walk(obj, prefix)
    return dict(sorted(found.items()))


class ParamStore:
    """Named parameter tensors with gradient buffers and Adam moments."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self.tensors: dict[str, Tensor] = dict(sorted(tensors.items()))
        if len({id(t) for t in self.tensors.values()}) != len(self.tensors):
            raise ContractError("a tensor is registered under two names")
        self.grads: dict[str, np.ndarray] | None = None
        self.m = {k: np.zeros(t.shape) for k, t in self.tensors.items()}
        self.v = {k: np.zeros(t.shape) for k, t in self.tensors.items()}

    @classmethod
    def from_params(cls, params, groups: tuple[str, ...] | None = None) -> "ParamStore":
        tensors = named_tensors(params)
        if groups is not None:
            tensors = {k: t for k, t in tensors.items() if k.split(".", 1)[0] in groups}
        return cls(tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def collect(self, grads: Gradients) -> None:
        self.grads = {k: np.array(grads[t]) for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        self.grads = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def backward(tape: Tape, output: Tensor, seed=None, store: ParamStore | None = None) -> Gradients:
    """Run the tape in reverse from ``output``; fill ``store`` gradients if given."""
    grads = tape.backward(output, seed)
    if store is not None:
        store.collect(grads)
    return grads


@dataclass
class GradcheckReport:
    name: str
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str | None:
        return max(self.errors, key=self.errors.get) if self.errors else None

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tol for e in self.errors.values())

    def to_dict(self) -> dict:
        return {
            "op": self.name,
            "passed": self.passed,
            "max_rel_error": self.max_error,
            "tol": self.tol,
            "per_param": dict(self.errors),
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def gradcheck(fn: Callable[[], Tensor], tensors: Mapping[str, Tensor], tol: float = 1e-6,
              step: float = 1e-6, name: str = "op", weights: np.ndarray | None = None,
              fault: float = 1.0) -> GradcheckReport:
    """Compare tape gradients of a scalar loss with central differences.

    ``fn`` recomputes the op from the tensors in ``tensors`` (which are
    perturbed in place). The loss is ``sum(fn())``, or ``sum(fn() * weights)``.
    ``fault`` scales the analytic gradient, for testing the harness itself.
    Failures are reported, never raised.

    The numeric derivative differences the two perturbed outputs element by
    element before reducing, so rounding of the (large) loss value itself
    does not swamp small gradient entries.
    """

    def loss_of(out: Tensor) -> Tensor:
        if weights is None:
            return sum_all(out)
        return weighted_sum(out, weights)

    with Tape() as tape:
        loss = loss_of(fn())
    grads = tape.backward(loss)

    report = GradcheckReport(name, tol=tol)
    saved = {k: t.data for k, t in tensors.items()}
    try:
        with no_tape(), extended_precision():
            # every checked tensor is widened so x +- step is exact to ~1e-19
            for t in tensors.values():
                t.data = t.data.astype(np.longdouble)
            for pname, t in tensors.items():
                analytic = grads[t] * fault
                numeric = np.empty(t.shape)
                flat = t.data.reshape(-1)
                num_flat = numeric.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    up = np.array(fn().data, dtype=np.longdouble)
                    hi = flat[i]
                    flat[i] = orig - step
                    down = fn().data
                    lo = flat[i]
                    flat[i] = orig
                    diff = up - down
                    if weights is not None:
                        diff = diff * weights
                    num_flat[i] = math.fsum(np.asarray(diff, dtype=np.float64).ravel()) / float(hi - lo)
                err = relative_error(analytic, numeric)
                report.errors[pname] = float(err.max()) if err.size else 0.0
    finally:
        for k, t in tensors.items():
            t.data = saved[k]
    return report


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    cosine: bool = False
    total_steps: int | None = None
    min_lr: float = 0.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("beta1 and beta2 must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ContractError("lr and eps must be positive, weight decay nonnegative")
        if self.cosine and not self.total_steps:
            raise ContractError("cosine schedule needs total_steps")


def cosine_lr(cfg: OptimConfig, step_index: int) -> float:
    if not cfg.cosine:
        return cfg.lr
    t = min(step_index, cfg.total_steps)
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * t / cfg.total_steps))


def adam_step(store: ParamStore, cfg: OptimConfig, step_index: int) -> None:
    """One AdamW update with decoupled weight decay; ``step_index`` counts from 0."""
    if store.grads is None:
        raise ContractError("adam_step called before gradients were collected")
    lr = cosine_lr(cfg, step_index)
    t = step_index + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in store.tensors.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p.data -= lr * cfg.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
