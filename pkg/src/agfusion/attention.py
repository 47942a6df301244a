"""Windowed self-attention enhancement and bidirectional cross-modal attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor_core import (
    BevMap,
    NormParams,
    Tensor,
    add,
    affine,
    as_tensor,
    attention_core,
    layer_norm,
    relu,
    reshape,
    transpose,
)
from .windowing import WindowSet, check_geometry, partition


@dataclass
class MhaParams:
    """Projection weights [C, C]; biases on query, value and output only."""

    num_heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor
    b_v: Tensor
    b_o: Tensor

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_v", "b_o"):
            setattr(self, name, as_tensor(getattr(self, name)))
        c = self.channels
        if self.num_heads < 1 or c % self.num_heads:
            raise ContractError(f"channels {c} not divisible by num_heads {self.num_heads}")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (c, c):
                raise ContractError(f"{name} must be [{c}, {c}]")
        for name in ("b_q", "b_v", "b_o"):
            if getattr(self, name).shape != (c,):
                raise ContractError(f"{name} must have length {c}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads

    @classmethod
    def init(cls, channels: int, num_heads: int, rng: np.random.Generator,
             weight_scale: float = 1.0) -> "MhaParams":
        std = weight_scale / math.sqrt(channels)
        w = [rng.normal(0.0, std, (channels, channels)) for _ in range(4)]
        return cls(num_heads, *w, *(np.zeros(channels) for _ in range(3)))

    @classmethod
    def zeros(cls, channels: int, num_heads: int) -> "MhaParams":
        z = np.zeros((channels, channels))
        return cls(num_heads, z, z, z, z, *(np.zeros(channels) for _ in range(3)))


@dataclass
class SaeBlockParams:
    mha: MhaParams
    ln1: NormParams
    ln2: NormParams
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def __post_init__(self):
        self.ffn_w1, self.ffn_b1 = as_tensor(self.ffn_w1), as_tensor(self.ffn_b1)
        self.ffn_w2, self.ffn_b2 = as_tensor(self.ffn_w2), as_tensor(self.ffn_b2)
        c = self.mha.channels
        hidden = self.ffn_w1.shape[1]
        if self.ffn_w1.shape[0] != c or hidden < c:
            raise ContractError(f"ffn_w1 must be [{c}, r*{c}] with r >= 1, got {self.ffn_w1.shape}")
        if self.ffn_w2.shape != (hidden, c) or self.ffn_b1.shape != (hidden,) \
                or self.ffn_b2.shape != (c,):
            raise ContractError("FFN weight shapes are inconsistent")
        if self.ln1.gamma.shape != (c,) or self.ln2.gamma.shape != (c,):
            raise ContractError("layer norm params must match channels")

    @classmethod
    def init(cls, channels: int, num_heads: int, rng: np.random.Generator,
             ffn_ratio: int = 4, weight_scale: float = 1.0) -> "SaeBlockParams":
        hidden = ffn_ratio * channels
        return cls(
            MhaParams.init(channels, num_heads, rng, weight_scale),
            NormParams.identity(channels),
            NormParams.identity(channels),
            rng.normal(0.0, weight_scale / math.sqrt(channels), (channels, hidden)),
            np.zeros(hidden),
            rng.normal(0.0, weight_scale / math.sqrt(hidden), (hidden, channels)),
            np.zeros(channels),
        )

    @classmethod
    def zeros(cls, channels: int, num_heads: int, ffn_ratio: int = 4) -> "SaeBlockParams":
        hidden = ffn_ratio * channels
        return cls(
            MhaParams.zeros(channels, num_heads),
            NormParams.identity(channels),
            NormParams.identity(channels),
            np.zeros((channels, hidden)),
            np.zeros(hidden),
            np.zeros((hidden, channels)),
            np.zeros(channels),
        )


def _zero_bias(c: int) -> Tensor:
    # softmax is invariant to a key bias (it shifts every logit of a row by q.b),
    # so the key projection carries none
    return Tensor(np.zeros(c))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, c = x.shape
    x = reshape(x, (b, t, heads, c // heads))
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (b * heads, t, c // heads))


def _join_heads(x: Tensor, batch: int, heads: int) -> Tensor:
    _, t, d = x.shape
    x = reshape(x, (batch, heads, t, d))
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (batch, t, heads * d))


def mha(q_tokens: Tensor, kv_tokens: Tensor, p: MhaParams) -> Tensor:
    """Multi-head attention of query tokens over key/value tokens.

    Accepts [T, C] or a batch of independent groups [B, T, C]; groups never
    attend across each other.
    """
    q_tokens, kv_tokens = as_tensor(q_tokens), as_tensor(kv_tokens)
    if q_tokens.ndim != kv_tokens.ndim or q_tokens.ndim not in (2, 3):
        raise ContractError(f"mha expects [T, C] or [B, T, C], got {q_tokens.shape} / {kv_tokens.shape}")
    squeeze = q_tokens.ndim == 2
    if squeeze:
        q_tokens = reshape(q_tokens, (1,) + q_tokens.shape)
        kv_tokens = reshape(kv_tokens, (1,) + kv_tokens.shape)
    c = p.channels
    if q_tokens.shape[-1] != c or kv_tokens.shape[-1] != c:
        raise ContractError(f"mha channel mismatch: {q_tokens.shape[-1]}, {kv_tokens.shape[-1]} vs {c}")
    if q_tokens.shape[0] != kv_tokens.shape[0]:
        raise ContractError("query and key/value batch sizes differ")
    batch, heads = q_tokens.shape[0], p.num_heads
    q = _split_heads(affine(q_tokens, p.w_q, p.b_q), heads)
    k = _split_heads(affine(kv_tokens, p.w_k, _zero_bias(c)), heads)
    v = _split_heads(affine(kv_tokens, p.w_v, p.b_v), heads)
    mixed = attention_core(q, k, v, 1.0 / math.sqrt(p.head_dim))
    out = affine(_join_heads(mixed, batch, heads), p.w_o, p.b_o)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def sae_block(window_tokens: Tensor, p: SaeBlockParams) -> Tensor:
    """Pre-norm attention and feed-forward sub-layers, each with a residual."""
    x = as_tensor(window_tokens)
    normed = layer_norm(x, p.ln1)
    x = add(mha(normed, normed, p.mha), x)
    hidden = relu(affine(layer_norm(x, p.ln2), p.ffn_w1, p.ffn_b1))
    return add(x, affine(hidden, p.ffn_w2, p.ffn_b2))


def sae_enhance(F: BevMap, side: int, p: SaeBlockParams | list[SaeBlockParams]) -> WindowSet:
    """Partition ``F`` and refine every window independently; stays in window form."""
    blocks = p if isinstance(p, (list, tuple)) else [p]
    ws = partition(F, side)
    tokens = ws.tokens
    for block in blocks:
        tokens = sae_block(tokens, block)
    return ws.with_tokens(tokens)


def cross_attend(cam: WindowSet, lidar: WindowSet, p_c2l: MhaParams,
                 p_l2c: MhaParams) -> tuple[WindowSet, WindowSet]:
    """Camera windows query lidar windows and vice versa, window by window."""
    if cam.geometry != lidar.geometry or cam.channels != lidar.channels:
        raise ContractError(
            f"cross_attend geometry mismatch: {cam.geometry}/C={cam.channels} vs "
            f"{lidar.geometry}/C={lidar.channels}"
        )
    a_c2l = mha(cam.tokens, lidar.tokens, p_c2l)
    a_l2c = mha(lidar.tokens, cam.tokens, p_l2c)
    return cam.with_tokens(a_c2l), lidar.with_tokens(a_l2c)


def count_macs(height: int, width: int, channels: int, side: int, num_heads: int,
               mode: str = "windowed") -> int:
    """Exact multiply-accumulates of the score (QKᵀ) and mix (attn·V) stages.

    Heads split the channels, so the total does not depend on ``num_heads``.
    """
    check_geometry(height, width, side)
    if channels % num_heads:
        raise ContractError(f"channels {channels} not divisible by num_heads {num_heads}")
    n = height * width
    if mode == "global":
        return 2 * n * n * channels
    if mode != "windowed":
        raise ContractError(f"mode must be 'windowed' or 'global', got {mode!r}")
    tokens = side * side
    return (n // tokens) * 2 * tokens * tokens * channels


def projection_macs(height: int, width: int, channels: int) -> int:
    """Q, K, V and output projections: identical in windowed and global mode."""
    return 4 * height * width * channels * channels
