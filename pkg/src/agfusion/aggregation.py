"""Multi-level aggregation, the residual output, and the end-to-end forward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import named_tensors
from .attention import MhaParams, SaeBlockParams, cross_attend, sae_enhance
from .errors import ContractError, WeightsMismatch
from .gated_fusion import (
    GateMap,
    GateNetParams,
    compute_gate,
    conv_fuser_baseline,
    fixed_gate,
    fuse_gated,
)
from .tensor_core import (
    BatchNormParams,
    BevMap,
    Modality,
    Tensor,
    add,
    as_tensor,
    batch_norm,
    concat_channels,
    conv1x1,
    relu,
)
from .windowing import WindowSet, check_geometry, merge, partition


@dataclass
class PhiFuseParams:
    conv_w: Tensor
    conv_b: Tensor
    bn: BatchNormParams

    def __post_init__(self):
        self.conv_w, self.conv_b = as_tensor(self.conv_w), as_tensor(self.conv_b)
        c = self.conv_w.shape[1]
        if self.conv_w.shape != (3 * c, c) or self.conv_b.shape != (c,):
            raise ContractError(f"conv_w must be [3C, C] and conv_b [C], got {self.conv_w.shape}")
        if self.bn.gamma.shape != (c,):
            raise ContractError("batch norm params must have C entries")

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "PhiFuseParams":
        return cls(
            rng.normal(0.0, 1.0 / math.sqrt(3 * channels), (3 * channels, channels)),
            np.zeros(channels),
            BatchNormParams.identity(channels),
        )

    @classmethod
    def zeros(cls, channels: int) -> "PhiFuseParams":
        return cls(np.zeros((3 * channels, channels)), np.zeros(channels),
                   BatchNormParams(np.ones(channels), np.zeros(channels)))


def aggregate(cam_enh: WindowSet, lidar_enh: WindowSet, fused: WindowSet,
              p: PhiFuseParams, mode: str = "train") -> BevMap:
    """F_out = relu(bn(conv1x1(concat(cam_enh, lidar_enh, fused))))."""
    if not cam_enh.geometry == lidar_enh.geometry == fused.geometry:
        raise ContractError("aggregate: window sets have different geometry")
    if not cam_enh.channels == lidar_enh.channels == fused.channels:
        raise ContractError("aggregate: window sets have different channel counts")
    if p.conv_w.shape[0] != 3 * cam_enh.channels:
        raise ContractError(f"Phi_fuse expects {p.conv_w.shape[0]} input channels")
    stacked = concat_channels([merge(ws).tensor for ws in (cam_enh, lidar_enh, fused)])
    z = batch_norm(conv1x1(stacked, p.conv_w, p.conv_b), p.bn, mode)
    return BevMap(relu(z), Modality.FUSED)


def residual_out(F_out: BevMap, F_cam: BevMap, F_lidar: BevMap) -> BevMap:
    """Y = relu(F_out + F_cam + F_lidar) with the ORIGINAL pre-enhancement maps."""
    if not F_out.shape == F_cam.shape == F_lidar.shape:
        raise ContractError(f"residual_out shapes differ: {F_out.shape}, {F_cam.shape}, {F_lidar.shape}")
    return BevMap(relu(add(add(F_out.tensor, F_cam.tensor), F_lidar.tensor)), Modality.FUSED)


STRATEGIES = ("adaptive", "fixed", "conv_fuser")


def parse_strategy(name: str) -> tuple[str, float | None]:
    """'adaptive' | 'conv_fuser' | 'fixed:<g>' -> (kind, gate value)."""
    if name in ("adaptive", "conv_fuser"):
        return name, None
    if name.startswith("fixed:"):
        g = float(name.split(":", 1)[1])
        if not 0.0 <= g <= 1.0:
            raise ContractError(f"fixed gate value {g} outside [0, 1]")
        return "fixed", g
    raise ContractError(f"unknown fusion strategy {name!r}")


@dataclass
class FusionConfig:
    channels: int = 32
    window: int = 8
    num_heads: int = 4
    depth: int = 1
    ffn_ratio: int = 4
    gate_mid: int | None = None
    strategy: str = "adaptive"
    weight_scale: float = 1.0

    def __post_init__(self):
        if self.channels < 1 or self.window < 1 or self.depth < 1 or self.ffn_ratio < 1:
            raise ContractError("channels, window, depth and ffn_ratio must be positive")
        if self.channels % self.num_heads:
            raise ContractError(f"channels {self.channels} not divisible by heads {self.num_heads}")
        if self.gate_mid is None:
            self.gate_mid = max(1, self.channels // 2)
        parse_strategy(self.strategy)

    def validate_map(self, height: int, width: int, channels: int) -> None:
        check_geometry(height, width, self.window)
        if channels != self.channels:
            raise ContractError(f"map has {channels} channels, config expects {self.channels}")


@dataclass
class PipelineParams:
    sae_cam: list[SaeBlockParams]
    sae_lidar: list[SaeBlockParams]
    c2l: MhaParams
    l2c: MhaParams
    gate: GateNetParams
    phi: PhiFuseParams
    conv_fuser_w: Tensor
    conv_fuser_b: Tensor

    def __post_init__(self):
        self.conv_fuser_w = as_tensor(self.conv_fuser_w)
        self.conv_fuser_b = as_tensor(self.conv_fuser_b)

    @classmethod
    def init(cls, cfg: FusionConfig, rng: np.random.Generator) -> "PipelineParams":
        c, heads, r, s = cfg.channels, cfg.num_heads, cfg.ffn_ratio, cfg.weight_scale
        return cls(
            [SaeBlockParams.init(c, heads, rng, r, s) for _ in range(cfg.depth)],
            [SaeBlockParams.init(c, heads, rng, r, s) for _ in range(cfg.depth)],
            MhaParams.init(c, heads, rng, s),
            MhaParams.init(c, heads, rng, s),
            GateNetParams.init(c, cfg.gate_mid, rng),
            PhiFuseParams.init(c, rng),
            rng.normal(0.0, 1.0 / math.sqrt(2 * c), (2 * c, c)),
            np.zeros(c),
        )

    @classmethod
    def zeros(cls, cfg: FusionConfig) -> "PipelineParams":
        """Every learned branch zeroed, norms neutral: only the residual path survives."""
        c, heads, r = cfg.channels, cfg.num_heads, cfg.ffn_ratio
        return cls(
            [SaeBlockParams.zeros(c, heads, r) for _ in range(cfg.depth)],
            [SaeBlockParams.zeros(c, heads, r) for _ in range(cfg.depth)],
            MhaParams.zeros(c, heads),
            MhaParams.zeros(c, heads),
            GateNetParams(np.zeros((2 * c, cfg.gate_mid)), np.zeros(cfg.gate_mid),
                          np.zeros((cfg.gate_mid, 1)), np.zeros(1)),
            PhiFuseParams.zeros(c),
            np.zeros((2 * c, c)),
            np.zeros(c),
        )

    def used_groups(self, strategy: str) -> tuple[str, ...]:
        """Top-level parameter groups that a fusion strategy actually reads."""
        kind, _ = parse_strategy(strategy)
        if kind == "conv_fuser":
            return ("sae_cam", "sae_lidar", "phi", "conv_fuser_w", "conv_fuser_b")
        if kind == "fixed":
            return ("sae_cam", "sae_lidar", "c2l", "l2c", "phi")
        return ("sae_cam", "sae_lidar", "c2l", "l2c", "gate", "phi")


@dataclass
class PipelineResult:
    Y: BevMap
    G: GateMap | None
    intermediates: dict = field(default_factory=dict)


def forward_pipeline(F_cam: BevMap, F_lidar: BevMap, cfg: FusionConfig,
                     params: PipelineParams, mode: str = "train",
                     strategy: str | None = None) -> PipelineResult:
    """Enhance, cross-attend, gate, aggregate and add the residual.

    ``strategy`` overrides ``cfg.strategy``; the conv_fuser strategy replaces
    cross-attention and gating with a static 1x1 convolution and returns no gate.
    """
    if F_cam.shape != F_lidar.shape:
        raise ContractError(f"camera map {F_cam.shape} and lidar map {F_lidar.shape} differ")
    cfg.validate_map(*F_cam.shape)
    kind, g_value = parse_strategy(strategy or cfg.strategy)
    h = cfg.window
    H, W, _ = F_cam.shape

    cam_enh = sae_enhance(F_cam, h, params.sae_cam)
    lidar_enh = sae_enhance(F_lidar, h, params.sae_lidar)
    inter = {"cam_enh": cam_enh, "lidar_enh": lidar_enh}

    if kind == "conv_fuser":
        G = None
        fused_map = conv_fuser_baseline(merge(cam_enh), merge(lidar_enh),
                                        params.conv_fuser_w, params.conv_fuser_b)
    else:
        a_c2l_ws, a_l2c_ws = cross_attend(cam_enh, lidar_enh, params.c2l, params.l2c)
        a_c2l, a_l2c = merge(a_c2l_ws), merge(a_l2c_ws)
        inter.update(a_c2l=a_c2l, a_l2c=a_l2c)
        if kind == "fixed":
            G = fixed_gate(g_value, H, W)
        else:
            G = compute_gate(a_c2l, a_l2c, params.gate)
        fused_map = fuse_gated(a_c2l, a_l2c, G)

    fused = partition(fused_map, h)
    F_out = aggregate(cam_enh, lidar_enh, fused, params.phi, mode)
    Y = residual_out(F_out, F_cam, F_lidar)
    inter.update(fused=fused_map, F_out=F_out)
    return PipelineResult(Y, G, inter)


def _running_stats(params: PipelineParams) -> dict[str, np.ndarray]:
    bn = params.phi.bn
    return {"phi.bn.running_mean": bn.running_mean, "phi.bn.running_var": bn.running_var}


def state_dict(params: PipelineParams) -> dict[str, np.ndarray]:
    """Every learned tensor plus the batch-norm running statistics, by dotted name."""
    out = {k: t.data.copy() for k, t in named_tensors(params).items()}
    out.update({k: v.copy() for k, v in _running_stats(params).items()})
    return dict(sorted(out.items()))


def load_state_dict(params: PipelineParams, state: dict[str, np.ndarray]) -> PipelineParams:
    """Copy ``state`` into ``params`` in place. Names and shapes must match exactly."""
    targets = {k: t.data for k, t in named_tensors(params).items()}
    targets.update(_running_stats(params))
    missing = sorted(set(targets) - set(state))
    extra = sorted(set(state) - set(targets))
    if missing or extra:
        raise WeightsMismatch(f"weights mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, dst in targets.items():
        src = np.asarray(state[k], dtype=np.float64)
        if src.shape != dst.shape:
            raise ContractError(f"weights[{k}]: expected shape {dst.shape}, got {src.shape}")
        dst[...] = src
    if np.any(params.phi.bn.running_var < 0):
        raise ContractError("running variance must be nonnegative")
    return params
