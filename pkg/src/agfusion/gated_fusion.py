"""Pixel-wise gate between the two cross-attention streams, plus fixed baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor_core import (
    BevMap,
    Modality,
    Tensor,
    add,
    as_tensor,
    concat_channels,
    hull_guard,
    conv1x1,
    mul,
    one_minus,
    relu,
    sigmoid,
)


@dataclass
class GateNetParams:
    """Two 1x1 convolutions, 2C -> C_mid -> 1, ReLU between and sigmoid after."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            setattr(self, name, as_tensor(getattr(self, name)))
        mid = self.w1.shape[1]
        if mid < 1 or self.b1.shape != (mid,) or self.w2.shape != (mid, 1) or self.b2.shape != (1,):
            raise ContractError("gate net shapes must be w1[2C, m], b1[m], w2[m, 1], b2[1]")
        if self.w1.shape[0] % 2:
            raise ContractError("gate net input width must be 2C")

    @classmethod
    def init(cls, channels: int, mid: int | None, rng: np.random.Generator) -> "GateNetParams":
        """Random first stage, zero second stage: the untrained gate is exactly 0.5."""
        mid = mid or max(1, channels // 2)
        return cls(
            rng.normal(0.0, 1.0 / math.sqrt(2 * channels), (2 * channels, mid)),
            np.zeros(mid),
            np.zeros((mid, 1)),
            np.zeros(1),
        )


@dataclass
class GateMap:
    tensor: Tensor

    def __post_init__(self):
        self.tensor = as_tensor(self.tensor)
        t = self.tensor
        if t.ndim != 3 or t.shape[2] != 1:
            raise ContractError(f"gate map must be [H, W, 1], got {t.shape}")
        d = t.data
        if not np.all(np.isfinite(d)) or d.min() < 0.0 or d.max() > 1.0:
            raise ContractError("gate entries must be finite and within [0, 1]")

    @property
    def values(self) -> np.ndarray:
        return self.tensor.data[..., 0]


def _same_shape(a: BevMap, b: BevMap, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def compute_gate(a_c2l: BevMap, a_l2c: BevMap, p: GateNetParams) -> GateMap:
    """G = sigmoid(net(concat(A_cam<-lidar, A_lidar<-cam))), one value per pixel."""
    _same_shape(a_c2l, a_l2c, "compute_gate")
    if p.w1.shape[0] != 2 * a_c2l.shape[2]:
        raise ContractError(f"gate net expects {p.w1.shape[0]} input channels, got 2x{a_c2l.shape[2]}")
    x = concat_channels([a_c2l.tensor, a_l2c.tensor])
    hidden = relu(conv1x1(x, p.w1, p.b1))
    return GateMap(sigmoid(conv1x1(hidden, p.w2, p.b2)))


def fuse_gated(a_c2l: BevMap, a_l2c: BevMap, G: GateMap) -> BevMap:
    """g * a + (1 - g) * b per pixel, the gate broadcast over channels."""
    _same_shape(a_c2l, a_l2c, "fuse_gated")
    if G.tensor.shape[:2] != a_c2l.shape[:2]:
        raise ContractError(f"gate {G.tensor.shape} does not cover map {a_c2l.shape}")
    g = G.tensor
    fused = add(mul(g, a_c2l.tensor), mul(one_minus(g), a_l2c.tensor))
    return BevMap(hull_guard(fused, a_c2l.tensor, a_l2c.tensor), Modality.FUSED)


def fixed_gate(g: float, height: int, width: int) -> GateMap:
    if not 0.0 <= g <= 1.0:
        raise ContractError(f"fixed gate value must lie in [0, 1], got {g}")
    return GateMap(np.full((height, width, 1), float(g)))


def conv_fuser_baseline(F_cam: BevMap, F_lidar: BevMap, W: Tensor, b: Tensor) -> BevMap:
    """Static fusion: one 1x1 convolution over the concatenated modalities."""
    _same_shape(F_cam, F_lidar, "conv_fuser_baseline")
    x = concat_channels([F_cam.tensor, F_lidar.tensor])
    return BevMap(conv1x1(x, W, b), Modality.FUSED)
