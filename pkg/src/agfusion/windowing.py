"""Non-overlapping square window partition of BEV maps and its exact inverse."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError, WindowSizeError
from .tensor_core import BevMap, Modality, Tensor, as_tensor, reshape, transpose


@dataclass
class WindowSet:
    """Tokens of shape [N_win, h*h, C].

    Windows are ordered row-major over the window grid and tokens row-major
    inside each window. ``height``/``width``/``side`` record the source map.
    """

    tokens: Tensor
    height: int
    width: int
    side: int
    modality: Modality = Modality.FUSED

    def __post_init__(self):
        self.tokens = as_tensor(self.tokens)
        check_geometry(self.height, self.width, self.side)
        expected = (self.num_windows, self.side * self.side)
        if self.tokens.ndim != 3 or self.tokens.shape[:2] != expected:
            raise ContractError(
                f"tokens shape {self.tokens.shape} inconsistent with geometry "
                f"(H={self.height}, W={self.width}, h={self.side})"
            )

    @property
    def num_windows(self) -> int:
        return (self.height // self.side) * (self.width // self.side)

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]

    @property
    def geometry(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.side)

    def with_tokens(self, tokens: Tensor, modality: Modality | None = None) -> "WindowSet":
        return WindowSet(tokens, self.height, self.width, self.side,
                         self.modality if modality is None else modality)


def check_geometry(height: int, width: int, side: int) -> None:
    if side < 1:
        raise WindowSizeError(f"window side must be >= 1, got {side}")
    if height % side or width % side:
        raise WindowSizeError(
            f"map {height}x{width} is not divisible by window side {side}; pick a divisor"
        )


def partition(F: BevMap, side: int) -> WindowSet:
    """Split an [H, W, C] map into (H/h)*(W/h) windows of h*h tokens."""
    H, W, C = F.shape
    check_geometry(H, W, side)
    gh, gw = H // side, W // side
    x = reshape(F.tensor, (gh, side, gw, side, C))
    x = transpose(x, (0, 2, 1, 3, 4))
    x = reshape(x, (gh * gw, side * side, C))
    return WindowSet(x, H, W, side, F.modality)


def merge(ws: WindowSet) -> BevMap:
    """Inverse of :func:`partition`."""
    H, W, side = ws.geometry
    C = ws.channels
    gh, gw = H // side, W // side
    x = reshape(ws.tokens, (gh, gw, side, side, C))
    x = transpose(x, (0, 2, 1, 3, 4))
    return BevMap(reshape(x, (H, W, C)), ws.modality)
