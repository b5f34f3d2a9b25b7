"""Random, tube and frame masking over a ``(T', H', W')`` token grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, ShapeError
from .tokenizer import Grid, TokenSequence

STRATEGIES = ("random", "tube", "frame")


@dataclass(frozen=True)
class MaskSpec:
    grid: Grid
    ratio: float
    strategy: str
    seed: int
    masked_indices: np.ndarray
    visible_indices: np.ndarray

    @property
    def n(self) -> int:
        return int(np.prod(self.grid))

    @property
    def ratio_effective(self) -> float:
        return len(self.masked_indices) / self.n

    def visible_mask(self) -> np.ndarray:
        keep = np.zeros(self.n, dtype=bool)
        keep[self.visible_indices] = True
        return keep


def _floor_count(ratio: float, n: int) -> int:
    # tolerate products like 0.95 * 20 landing a hair under an integer
    return min(n, math.floor(ratio * n + 1e-9))


def _round_count(ratio: float, n: int) -> int:
    return min(n, math.floor(ratio * n + 0.5))


def mask_count(grid: Grid, ratio: float, strategy: str) -> int:
    """Number of masked tokens the strategy produces on ``grid``."""
    gt, gh, gw = grid
    if strategy == "random":
        return _floor_count(ratio, gt * gh * gw)
    if strategy == "tube":
        return _round_count(ratio, gh * gw) * gt
    if strategy == "frame":
        return _round_count(ratio, gt) * gh * gw
    raise ConfigError(f"unknown masking strategy {strategy!r}; expected one of {STRATEGIES}")


def sample_mask(grid: Grid, ratio: float, strategy: str, seed: int) -> MaskSpec:
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"masking ratio must lie in [0, 1], got {ratio}", "ratio")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown masking strategy {strategy!r}; expected one of {STRATEGIES}")
    gt, gh, gw = (int(g) for g in grid)
    if min(gt, gh, gw) < 1:
        raise ConfigError(f"grid must be positive, got {grid}")
    n, spatial = gt * gh * gw, gh * gw
    rng = np.random.default_rng(seed)
    if strategy == "random":
        masked = rng.permutation(n)[: _floor_count(ratio, n)]
    elif strategy == "tube":
        cells = rng.permutation(spatial)[: _round_count(ratio, spatial)]
        masked = (np.arange(gt)[:, None] * spatial + cells[None, :]).ravel()
    else:
        slots = rng.permutation(gt)[: _round_count(ratio, gt)]
        masked = (slots[:, None] * spatial + np.arange(spatial)[None, :]).ravel()
    masked = np.sort(masked).astype(np.int64)
    visible = np.setdiff1d(np.arange(n, dtype=np.int64), masked, assume_unique=True)
    return MaskSpec((gt, gh, gw), float(ratio), strategy, int(seed), masked, visible)


@dataclass
class VisibleTokens:
    """Rows of a :class:`TokenSequence` kept by a mask; ``index`` maps back to token order."""

    tokens: Tensor
    pos: Tensor
    index: np.ndarray
    grid: Grid
    provenance: str


def apply_mask(seq: TokenSequence, mask: MaskSpec) -> VisibleTokens:
    if seq.n != mask.n:
        raise ShapeError(f"mask covers {mask.n} tokens but the sequence has {seq.n}")
    idx = torch.as_tensor(mask.visible_indices, device=seq.tokens.device)
    return VisibleTokens(
        seq.tokens.index_select(-2, idx),
        seq.pos.index_select(-2, idx),
        mask.visible_indices.copy(),
        seq.grid,
        seq.provenance,
    )


def scatter_tokens(visible: Tensor, index: Tensor, n: int, fill: Tensor) -> Tensor:
    """Place ``(B, V, D)`` rows at ``index[B, V]`` of an ``(B, n, D)`` canvas filled with ``fill``."""
    B, V, D = visible.shape
    if index.shape != (B, V):
        raise ShapeError(f"index shape {tuple(index.shape)} does not match visible rows {(B, V)}")
    canvas = fill.to(visible.dtype).expand(B, n, D).clone()
    return canvas.scatter(1, index.unsqueeze(-1).expand(B, V, D), visible)


__all__ = ["STRATEGIES", "MaskSpec", "VisibleTokens", "apply_mask", "mask_count", "sample_mask", "scatter_tokens"]
