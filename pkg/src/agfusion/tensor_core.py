"""Dense float64 tensors and the differentiable kernels the pipeline is built from.

Every op is a pure function of its inputs. When a :class:`~agfusion.tape.Tape`
is active the op also records a backward closure; the closures use the
forward values they captured and nothing else.
"""

from __future__ import annotations

import contextvars
import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import backend
from .errors import ContractError
from .tape import active_tape

DEFAULT_EPS = 1e-5

_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("agfusion_dtype", default=np.float64)


class extended_precision:
    """Compute new tensors in ``np.longdouble`` with the numpy kernels.

    Used by the finite-difference oracle to push forward-pass rounding
    below the size of a 1e-6 perturbation. Where ``longdouble`` is plain
    double (some platforms) this is a no-op apart from the backend switch.
    """

    def __enter__(self):
        self._dtype = _DTYPE.set(np.longdouble)
        self._backend = backend.use("python")
        self._backend.__enter__()
        return self

    def __exit__(self, *exc):
        self._backend.__exit__(*exc)
        _DTYPE.reset(self._dtype)


class Tensor:
    """Row-major float64 array. Identity matters: gradients are keyed by object."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data):
        self.data = np.array(data, dtype=_DTYPE.get(), order="C")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Modality(str, enum.Enum):
    CAMERA = "camera"
    LIDAR = "lidar"
    FUSED = "fused"


@dataclass
class BevMap:
    tensor: Tensor
    modality: Modality = Modality.FUSED

    def __post_init__(self):
        self.tensor = as_tensor(self.tensor)
        if self.tensor.ndim != 3 or min(self.tensor.shape) < 1:
            raise ContractError(f"BevMap needs shape [H, W, C] with sizes >= 1, got {self.tensor.shape}")
        self.modality = Modality(self.modality)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.tensor.shape


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.gamma = as_tensor(self.gamma)
        self.beta = as_tensor(self.beta)
        if not self.eps > 0:
            raise ContractError("layer norm eps must be positive")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ContractError("gamma and beta must be matching length-C vectors")

    @classmethod
    def identity(cls, channels: int, eps: float = DEFAULT_EPS) -> "NormParams":
        return cls(np.ones(channels), np.zeros(channels), eps)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    eps: float = DEFAULT_EPS
    momentum: float = 0.1

    def __post_init__(self):
        self.gamma = as_tensor(self.gamma)
        self.beta = as_tensor(self.beta)
        c = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)
        self.running_mean = np.array(self.running_mean, dtype=np.float64)
        self.running_var = np.array(self.running_var, dtype=np.float64)
        if not self.eps > 0:
            raise ContractError("batch norm eps must be positive")
        if not 0 < self.momentum <= 1:
            raise ContractError("batch norm momentum must lie in (0, 1]")
        if np.any(self.running_var < 0):
            raise ContractError("running variance must be nonnegative")

    @classmethod
    def identity(cls, channels: int, eps: float = DEFAULT_EPS, momentum: float = 0.1) -> "BatchNormParams":
        return cls(np.ones(channels), np.zeros(channels), eps=eps, momentum=momentum)


def _record(op, inputs, out, backward):
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _matmul(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    return backend.kernels().matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


# -- elementwise and structural ops ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data * c)
    return _record("scale", (x,), out, lambda g: (g * c,))


def one_minus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(1.0 - x.data)
    return _record("one_minus", (x,), out, lambda g: (-g,))


def hull_guard(x: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """Clamp ``x`` elementwise into [min(a, b), max(a, b)].

    For x a convex combination of a and b the exact value already lies in
    that interval, so the clamp only undoes rounding (at most a few ulps)
    and the backward passes the gradient of x straight through.
    """
    x, a, b = as_tensor(x), as_tensor(a), as_tensor(b)
    lo = np.minimum(a.data, b.data)
    hi = np.maximum(a.data, b.data)
    out = Tensor(np.minimum(np.maximum(x.data, lo), hi))
    return _record("hull_guard", (x,), out, lambda g: (g,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    return _record("transpose", (x,), out, lambda g: (g.transpose(inverse),))


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.sum(x.data))
    return _record("sum_all", (x,), out, lambda g: (np.full(x.shape, float(g)),))


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """sum(x * w) with a constant weight array."""
    x = as_tensor(x)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != x.shape:
        raise ContractError(f"weight shape {w.shape} != tensor shape {x.shape}")
    out = Tensor(np.sum(x.data * w))
    return _record("weighted_sum", (x,), out, lambda g: (float(g) * w,))


def mse(x: Tensor, target: np.ndarray) -> Tensor:
    x = as_tensor(x)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != x.shape:
        raise ContractError(f"target shape {t.shape} != prediction shape {x.shape}")
    diff = x.data - t
    out = Tensor(np.mean(diff * diff))
    return _record("mse", (x,), out, lambda g: (float(g) * 2.0 * diff / diff.size,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record("relu", (x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(y)
    return _record("sigmoid", (x,), out, lambda g: (g * y * (1.0 - y),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis, preserving input order."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ContractError("concat_channels needs at least one input")
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ContractError(f"concat inputs disagree on leading dims: {lead} vs {x.shape[:-1]}")
    sizes = [x.shape[-1] for x in xs]
    out = Tensor(np.concatenate([x.data for x in xs], axis=-1))
    splits = np.cumsum(sizes)[:-1]
    return _record("concat_channels", tuple(xs), out,
                   lambda g: tuple(np.split(g, splits, axis=-1)))


# -- normalization ------------------------------------------------------------


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    """Normalize over the last axis with biased variance, then scale and shift."""
    x = as_tensor(x)
    c = p.gamma.shape[0]
    if x.shape[-1] != c:
        raise ContractError(f"layer_norm: last axis {x.shape[-1]} != params length {c}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = centered * inv
    out = Tensor(xhat * p.gamma.data + p.beta.data)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * p.gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, p.gamma, p.beta), out, backward)


def batch_norm(F: Tensor, p: BatchNormParams, mode: str = "train") -> Tensor:
    """Per-channel normalization over every spatial position of one map.

    In train mode the running statistics of ``p`` are updated in place.
    """
    F = as_tensor(F)
    c = p.gamma.shape[0]
    if F.shape[-1] != c:
        raise ContractError(f"batch_norm: channel dim {F.shape[-1]} != params length {c}")
    if mode not in ("train", "eval"):
        raise ContractError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    x = F.data.reshape(-1, c)
    n = x.shape[0]
    if mode == "train":
        mean = x.mean(axis=0)
        centered = x - mean
        var = (centered * centered).mean(axis=0)
        p.running_mean[:] = (1.0 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var[:] = (1.0 - p.momentum) * p.running_var + p.momentum * var
    else:
        mean = p.running_mean.copy()
        centered = x - mean
        var = p.running_var.copy()
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = centered * inv
    out = Tensor((xhat * p.gamma.data + p.beta.data).reshape(F.shape))

    def backward(g):
        g2 = g.reshape(n, c)
        dgamma = (g2 * xhat).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g2 * p.gamma.data
        if mode == "train":
            dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        else:
            dx = dxhat * inv
        return dx.reshape(F.shape), dgamma, dbeta

    return _record("batch_norm", (F, p.gamma, p.beta), out, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ContractError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    return _record("softmax", (x,), out,
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# -- linear maps --------------------------------------------------------------


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = x W + b over the last axis of x (any number of leading axes)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ContractError(f"affine: x last axis {x.shape[-1]} vs W {W.shape}")
    if b.shape != (W.shape[1],):
        raise ContractError(f"affine: bias shape {b.shape} != ({W.shape[1]},)")
    x2 = x.data.reshape(-1, W.shape[0])
    y2, macs = _matmul(x2, W.data)
    backend.tally("projection", macs)
    out = Tensor((y2 + b.data).reshape(x.shape[:-1] + (W.shape[1],)))

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        dx, _ = _matmul(g2, W.data.T)
        dW, _ = _matmul(x2.T, g2)
        return dx.reshape(x.shape), dW, g2.sum(axis=0)

    return _record("affine", (x, W, b), out, backward)


def conv1x1(F: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Pointwise convolution of an [H, W, C_in] map: affine at every pixel."""
    F, W = as_tensor(F), as_tensor(W)
    if F.ndim != 3:
        raise ContractError(f"conv1x1 expects [H, W, C], got {F.shape}")
    if W.ndim != 2 or F.shape[-1] != W.shape[0]:
        raise ContractError(f"conv1x1: input channels {F.shape[-1]} vs W {W.shape}")
    h, w, cin = F.shape
    y = affine(reshape(F, (h * w, cin)), W, b)
    return reshape(y, (h, w, W.shape[1]))


def attention_core(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """softmax(q kᵀ · scale) v for each leading batch index.

    q: [B, Tq, d]; k, v: [B, Tk, d]. Runs on the active kernel backend and
    reports score and mix MACs to any active counter.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.shape != k.shape or q.shape[0] != k.shape[0] \
            or q.shape[2] != k.shape[2]:
        raise ContractError(f"attention_core shapes q{q.shape} k{k.shape} v{v.shape}")
    kern = backend.kernels()
    out_data, probs, macs = kern.attention_forward(q.data, k.data, v.data, float(scale))
    backend.tally("attention", macs)
    out = Tensor(out_data)

    def backward(g):
        return kern.attention_backward(np.ascontiguousarray(g), q.data, k.data, v.data,
                                       probs, float(scale))

    return _record("attention_core", (q, k, v), out, backward)
