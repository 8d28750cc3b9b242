"""Window partitioning and candidate-region index tables."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensorlab import DimensionError, Tensor, reshape, transpose


class Region(str, enum.Enum):
    CROSS = "cross"
    RECTANGLE = "rectangle"


@dataclass(frozen=True)
class RegionShape:
    kind: Region
    radius: int = 2

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"region radius must be >= 1, got {self.radius}")
        object.__setattr__(self, "kind", Region(self.kind))

    @property
    def count(self) -> int:
        if self.kind is Region.CROSS:
            return 4 * self.radius
        return (2 * self.radius + 1) ** 2 - 1


@dataclass(frozen=True)
class WindowGrid:
    k: int
    h: int
    w: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"window size must be >= 1, got {self.k}")
        if self.h % self.k or self.w % self.k:
            raise DimensionError(f"plane {self.h}x{self.w} is not divisible by window {self.k}")

    @property
    def s_h(self) -> int:
        return self.h // self.k

    @property
    def s_w(self) -> int:
        return self.w // self.k

    @property
    def count(self) -> int:
        return self.s_h * self.s_w

    def flat(self, row: int, col: int) -> int:
        return row * self.s_w + col

    def coords(self, flat: int) -> tuple[int, int]:
        return divmod(flat, self.s_w)


def partition(x: Tensor, k: int) -> Tensor:
    """``[c,h,w] -> [s_h,s_w,c,k*k]``; window (i,j) holds rows i*k..(i+1)*k row-major."""
    c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"partition: {h}x{w} not divisible by window {k}")
    t = reshape(x, (c, h // k, k, w // k, k))
    t = transpose(t, (1, 3, 0, 2, 4))
    return reshape(t, (h // k, w // k, c, k * k))


def merge(windows: Tensor, k: int, h: int, w: int) -> Tensor:
    s_h, s_w, c, kk = windows.shape
    if kk != k * k or s_h * k != h or s_w * k != w:
        raise DimensionError(f"merge: windows {windows.shape} do not tile {h}x{w} with k={k}")
    t = reshape(windows, (s_h, s_w, c, k, k))
    t = transpose(t, (2, 0, 3, 1, 4))
    return reshape(t, (c, h, w))


def to_tokens(x: Tensor, k: int) -> Tensor:
    """``[c,h,w] -> [S,k*k,c]`` with windows in row-major grid order."""
    c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"to_tokens: {h}x{w} not divisible by window {k}")
    t = reshape(x, (c, h // k, k, w // k, k))
    t = transpose(t, (1, 3, 2, 4, 0))
    return reshape(t, ((h // k) * (w // k), k * k, c))


def from_tokens(t: Tensor, k: int, h: int, w: int) -> Tensor:
    c = t.shape[-1]
    t = reshape(t, (h // k, w // k, k, k, c))
    t = transpose(t, (4, 0, 2, 1, 3))
    return reshape(t, (c, h, w))


def candidate_offsets(shape: RegionShape) -> list[tuple[int, int]]:
    """Window offsets of the candidate region, sorted by (dy, dx), centre excluded."""
    r = shape.radius
    if shape.kind is Region.CROSS:
        offs = [(d, 0) for d in range(-r, r + 1) if d] + [(0, d) for d in range(-r, r + 1) if d]
    else:
        offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]
    return sorted(offs)


def build_index_table(grid: WindowGrid, shape: RegionShape) -> np.ndarray:
    """Absolute flat window index for every (row, col, slot); coordinates clamp to the grid."""
    offs = np.array(candidate_offsets(shape), dtype=np.intp)
    rows = np.arange(grid.s_h)[:, None, None] + offs[None, None, :, 0]
    cols = np.arange(grid.s_w)[None, :, None] + offs[None, None, :, 1]
    rows = np.clip(rows, 0, grid.s_h - 1)
    cols = np.clip(cols, 0, grid.s_w - 1)
    return np.broadcast_to(rows * grid.s_w + cols, (grid.s_h, grid.s_w, len(offs))).copy()
