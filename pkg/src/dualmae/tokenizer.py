"""Tubelet/patch tokenization, sinusoidal positions and the inverse pixel map.

Token order is row-major over the token grid ``(t', y, x)`` and every patch
payload is flattened in ``(C, t, h, w)`` order, so a decoder row of width
``t*C*h*w`` reshapes directly to a ``C x t x h x w`` pixel cube.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ConfigError, ShapeError

Grid = tuple[int, int, int]


@dataclass(frozen=True)
class PatchConfig:
    t: int = 2
    h: int = 16
    w: int = 16
    dim: int = 768

    def __post_init__(self):
        if min(self.t, self.h, self.w) < 1 or self.dim < 1:
            raise ConfigError(f"patch sizes and embed dim must be positive: {self}")

    def payload(self, channels: int, frame: bool = False) -> int:
        return (1 if frame else self.t) * channels * self.h * self.w

    def grid(self, T: int, H: int, W: int) -> Grid:
        for axis, size, step in (("T", T, self.t), ("H", H, self.h), ("W", W, self.w)):
            if size % step:
                raise ConfigError(f"axis {axis}={size} is not divisible by patch size {step}", f"patch.{axis}")
        return T // self.t, H // self.h, W // self.w


@dataclass
class TokenSequence:
    """Embedded tokens (positions already added) plus their grid and position table."""

    tokens: Tensor
    grid: Grid
    pos: Tensor
    provenance: str

    @property
    def n(self) -> int:
        return self.tokens.shape[-2]


def positional_encoding(grid: Grid, dim: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """Fixed sinusoid table over flattened grid positions, shape ``(N, dim)``."""
    if dim % 2:
        raise ConfigError(f"positional encoding needs an even width, got {dim}")
    return _sincos(int(np.prod(grid)), dim).to(dtype)


@lru_cache(maxsize=64)
def _sincos(n: int, dim: int) -> Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.empty(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table


def _as_tensor(x) -> Tensor:
    return torch.as_tensor(x) if not isinstance(x, Tensor) else x


def patchify(clips, cfg: PatchConfig) -> Tensor:
    """``(B, C, T, H, W)`` or ``(C, T, H, W)`` pixels -> ``(B, N, t*C*h*w)`` payloads."""
    x = _as_tensor(clips)
    single = x.dim() == 4
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 5:
        raise ShapeError(f"expected a (B, C, T, H, W) clip batch, got shape {tuple(x.shape)}")
    B, C, T, H, W = x.shape
    gt, gh, gw = cfg.grid(T, H, W)
    x = x.reshape(B, C, gt, cfg.t, gh, cfg.h, gw, cfg.w)
    x = x.permute(0, 2, 4, 6, 1, 3, 5, 7).reshape(B, gt * gh * gw, C * cfg.t * cfg.h * cfg.w)
    return x[0] if single else x


def patchify_frames(frames, cfg: PatchConfig) -> Tensor:
    """``(B, C, H, W)`` or ``(C, H, W)`` frames -> ``(B, N, C*h*w)`` payloads."""
    x = _as_tensor(frames)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ShapeError(f"expected a (B, C, H, W) frame batch, got shape {tuple(x.shape)}")
    out = patchify(x.unsqueeze(2), PatchConfig(1, cfg.h, cfg.w, cfg.dim))
    return out[0] if single else out


def unpatchify(patches, grid: Grid, cfg: PatchConfig, channels: int, frame: bool = False) -> Tensor:
    """Exact inverse of :func:`patchify` (or :func:`patchify_frames` when ``frame``)."""
    x = _as_tensor(patches)
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    t = 1 if frame else cfg.t
    width = cfg.payload(channels, frame)
    if x.shape[-1] != width:
        raise ShapeError(f"patch payload width {x.shape[-1]} != t*C*h*w = {width}")
    gt, gh, gw = grid
    if x.shape[-2] != gt * gh * gw:
        raise ShapeError(f"{x.shape[-2]} patches do not fill grid {grid}")
    B = x.shape[0]
    x = x.reshape(B, gt, gh, gw, channels, t, cfg.h, cfg.w).permute(0, 4, 1, 5, 2, 6, 3, 7)
    x = x.reshape(B, channels, gt * t, gh * cfg.h, gw * cfg.w)
    if frame:
        x = x[:, :, 0]
    return x[0] if single else x


class PatchProjection(nn.Linear):
    """Linear patch embedding; equal to a 3-D convolution with stride == kernel."""

    def __init__(self, cfg: PatchConfig, channels: int, frame: bool = False, **kwargs):
        super().__init__(cfg.payload(channels, frame), cfg.dim, **kwargs)
        self.cfg = cfg
        self.channels = channels
        self.frame = frame


def _embed(payload: Tensor, grid: Grid, weights: PatchProjection, provenance: str) -> TokenSequence:
    if payload.shape[-1] != weights.in_features:
        raise ShapeError(f"patch payload width {payload.shape[-1]} != projection input {weights.in_features}")
    pos = positional_encoding(grid, weights.out_features).to(device=payload.device, dtype=weights.weight.dtype)
    tokens = weights(payload.to(weights.weight.dtype)) + pos
    return TokenSequence(tokens, grid, pos, provenance)


def tokenize_video(clip, cfg: PatchConfig, weights: PatchProjection) -> TokenSequence:
    x = _as_tensor(clip)
    grid = cfg.grid(*x.shape[-3:])
    return _embed(patchify(x, cfg), grid, weights, "video")


def tokenize_frame(frame, cfg: PatchConfig, weights: PatchProjection) -> TokenSequence:
    x = _as_tensor(frame)
    _, gh, gw = cfg.grid(cfg.t, *x.shape[-2:])
    return _embed(patchify_frames(x, cfg), (1, gh, gw), weights, "frame")


__all__ = [
    "PatchConfig",
    "PatchProjection",
    "TokenSequence",
    "patchify",
    "patchify_frames",
    "positional_encoding",
    "tokenize_frame",
    "tokenize_video",
    "unpatchify",
]
