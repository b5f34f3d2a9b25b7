"""Two-branch masked autoencoder: video/frame encoders, projection heads, decoder.

The video branch encodes visible tubelet tokens with joint space-time
attention; the frame branch encodes visible patches of sampled frames. Both
project into a shared invariant space. The decoder narrows encoder features,
re-inserts a learnable mask token at masked positions, and predicts pixels
for every tubelet.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, FormatError, InputError, ShapeError
from .masking import MaskSpec, scatter_tokens
from .tokenizer import Grid, PatchConfig, PatchProjection, patchify, patchify_frames, positional_encoding


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    frames: int = 8
    height: int = 32
    width: int = 32
    patch_t: int = 2
    patch_h: int = 8
    patch_w: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    proj_dim: int = 32
    dec_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    embed_dim: int = 32

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"encoder width {self.dim} not divisible by {self.heads} heads", "model.heads")
        if self.dec_dim % self.dec_heads:
            raise ConfigError(f"decoder width {self.dec_dim} not divisible by {self.dec_heads} heads", "model.dec_heads")
        for key in ("dim", "dec_dim"):
            if getattr(self, key) % 2:
                raise ConfigError("sinusoidal positions need an even width", f"model.{key}")
        for key in ("depth", "dec_depth", "proj_dim", "embed_dim", "channels"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", f"model.{key}")
        self.patch.grid(self.frames, self.height, self.width)

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(self.patch_t, self.patch_h, self.patch_w, self.dim)

    @property
    def video_grid(self) -> Grid:
        return self.patch.grid(self.frames, self.height, self.width)

    @property
    def frame_grid(self) -> Grid:
        return (1,) + self.video_grid[1:]

    @property
    def payload(self) -> int:
        return self.patch.payload(self.channels)


PRESETS = {
    "toy": ModelConfig(),
    "base": ModelConfig(
        channels=3, frames=16, height=224, width=224, patch_t=2, patch_h=16, patch_w=16,
        dim=768, depth=12, heads=12, proj_dim=384, dec_dim=384, dec_depth=4, dec_heads=6, embed_dim=384,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}", "model.preset")
    return replace(PRESETS[name], **{k: v for k, v in overrides.items() if v is not None})


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        B, N, D = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1) / math.sqrt(D // self.heads)).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out), attn


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        y, attn = self.attn(self.norm1(x))
        x = x + y
        return x + self.mlp(self.norm2(x)), attn


class Encoder(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor, return_attention: bool = False):
        maps = []
        for blk in self.blocks:
            x, attn = blk(x)
            maps.append(attn)
        x = self.norm(x)
        return (x, maps) if return_attention else x


class MLPHead(nn.Module):
    """Row-wise two-layer perceptron."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, out_bias: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out, bias=out_bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.fc1.in_features:
            raise ShapeError(f"head expects width {self.fc1.in_features}, got {x.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(x)))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.narrow = nn.Linear(cfg.dim, cfg.dec_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.dec_dim))
        self.blocks = nn.ModuleList(Block(cfg.dec_dim, cfg.dec_heads, cfg.mlp_ratio) for _ in range(cfg.dec_depth))
        self.norm = nn.LayerNorm(cfg.dec_dim)
        self.head = nn.Linear(cfg.dec_dim, cfg.payload)

    def assemble(self, features: Tensor, visible_idx: Tensor, grid: Grid) -> Tensor:
        """Narrowed visible rows at their positions, mask token elsewhere, positions added."""
        n = int(np.prod(grid))
        x = scatter_tokens(self.narrow(features), visible_idx, n, self.mask_token)
        return x + positional_encoding(grid, x.shape[-1]).to(device=x.device, dtype=x.dtype)

    def forward(self, features: Tensor, visible_idx: Tensor, grid: Grid) -> tuple[Tensor, Tensor]:
        x = self.assemble(features, visible_idx, grid)
        for blk in self.blocks:
            x, _ = blk(x)
        x = self.norm(x)
        return x, self.head(x)


# --------------------------------------------------------------------------
# pooling into video-level and frame-level embeddings
# --------------------------------------------------------------------------


@dataclass
class ProjectedEmbedding:
    vector: Tensor
    level: str
    branch: str
    frame_index: int | None = None
    fallback: bool = False


def pool_mean(rows: Tensor) -> Tensor:
    """Mean over the token axis (``-2``)."""
    if rows.shape[-2] == 0:
        raise InputError("cannot pool zero visible tokens")
    return rows.mean(dim=-2)


def pool_slots(rows: Tensor, visible_idx: Tensor, grid: Grid) -> tuple[Tensor, Tensor]:
    """Per temporal slot means of ``(B, V, D)`` rows -> ``(B, T', D)`` and a fallback flag ``(B, T')``.

    Slots without a visible token take the video-level mean.
    """
    if rows.shape[:2] != visible_idx.shape:
        raise ShapeError(f"rows {tuple(rows.shape)} do not match index {tuple(visible_idx.shape)}")
    gt, gh, gw = grid
    onehot = F.one_hot(visible_idx // (gh * gw), gt).to(rows.dtype)
    sums = onehot.transpose(1, 2) @ rows
    counts = onehot.sum(dim=1)
    empty = counts == 0
    means = sums / counts.clamp(min=1).unsqueeze(-1)
    means = torch.where(empty.unsqueeze(-1), pool_mean(rows).unsqueeze(1), means)
    return means, empty


def pool_video_level(rows: Tensor, mask: MaskSpec | None = None, branch: str = "video") -> ProjectedEmbedding:
    if mask is not None and rows.shape[-2] != len(mask.visible_indices):
        raise ShapeError(f"{rows.shape[-2]} rows but mask has {len(mask.visible_indices)} visible tokens")
    return ProjectedEmbedding(pool_mean(rows), "video", branch)


def pool_frame_level(rows: Tensor, mask: MaskSpec, grid: Grid, tubelet: int, frames: int | None = None) -> list[ProjectedEmbedding]:
    """One embedding per frame index ``j`` (from slot ``j // tubelet``), or per slot if ``frames`` is None."""
    if rows.shape[-2] != len(mask.visible_indices) or tuple(mask.grid) != tuple(grid):
        raise ShapeError("projected rows, mask and grid disagree")
    idx = torch.as_tensor(mask.visible_indices, device=rows.device).unsqueeze(0)
    means, empty = pool_slots(rows.unsqueeze(0), idx, grid)
    if frames is None:
        return [ProjectedEmbedding(means[0, s], "frame", "video", s, bool(empty[0, s])) for s in range(grid[0])]
    return [
        ProjectedEmbedding(means[0, j // tubelet], "frame", "video", j, bool(empty[0, j // tubelet]))
        for j in range(frames)
    ]


# --------------------------------------------------------------------------
# the model
# --------------------------------------------------------------------------


class DualBranchMAE(nn.Module):
    """Video branch (shared by the raw and augmented views), frame branch, decoder and ``e_u``."""

    def __init__(self, cfg: ModelConfig, device: torch.device | str | None = None):
        super().__init__()
        self.cfg = cfg
        with torch.device(device or "cpu"):
            patch = cfg.patch
            self.video_embed = PatchProjection(patch, cfg.channels)
            self.video_encoder = Encoder(cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio)
            self.video_head = MLPHead(cfg.dim, cfg.proj_dim, cfg.proj_dim)
            self.frame_embed = PatchProjection(patch, cfg.channels, frame=True)
            self.frame_encoder = Encoder(cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio)
            self.frame_head = MLPHead(cfg.dim, cfg.proj_dim, cfg.proj_dim)
            self.decoder = Decoder(cfg)
            # only differences of e_u outputs enter the loss, so an output bias would never train
            self.decoder_embed = MLPHead(cfg.dec_dim, cfg.dec_dim, cfg.embed_dim, out_bias=False)
        if str(device) != "meta":
            self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.decoder.mask_token, std=0.02)

    def image_branch(self) -> list[nn.Module]:
        return [self.frame_embed, self.frame_encoder, self.frame_head]

    def video_encoder_modules(self) -> list[nn.Module]:
        return [self.video_embed, self.video_encoder]

    # tokenization -------------------------------------------------------

    def tokenize_video(self, clips: Tensor) -> tuple[Tensor, Grid]:
        grid = self.cfg.patch.grid(*clips.shape[-3:])
        tokens = self.video_embed(patchify(clips, self.cfg.patch))
        return tokens + positional_encoding(grid, self.cfg.dim).to(tokens), grid

    def tokenize_frames(self, frames: Tensor) -> tuple[Tensor, Grid]:
        _, gh, gw = self.cfg.patch.grid(self.cfg.patch_t, *frames.shape[-2:])
        tokens = self.frame_embed(patchify_frames(frames, self.cfg.patch))
        return tokens + positional_encoding((1, gh, gw), self.cfg.dim).to(tokens), (1, gh, gw)

    # encoders and heads -------------------------------------------------

    @staticmethod
    def _batched(x: Tensor) -> tuple[Tensor, bool]:
        if x.dim() == 2:
            return x.unsqueeze(0), True
        return x, False

    def _encode(self, encoder: Encoder, visible: Tensor) -> Tensor:
        x, single = self._batched(visible)
        if x.shape[-2] < 1:
            raise InputError("encoder needs at least one visible token")
        out = encoder(x)
        return out[0] if single else out

    def encode_video(self, visible: Tensor) -> Tensor:
        return self._encode(self.video_encoder, visible)

    def encode_frame(self, visible: Tensor) -> Tensor:
        return self._encode(self.frame_encoder, visible)

    def project(self, features: Tensor, branch: str = "video") -> Tensor:
        head = {"video": self.video_head, "frame": self.frame_head}[branch]
        return head(features)

    def decode(self, features: Tensor, visible_idx: Tensor, grid: Grid) -> tuple[Tensor, Tensor]:
        """Decoder features ``(B, N, dec_dim)`` and pixel predictions ``(B, N, t*C*h*w)``."""
        x, single = self._batched(features)
        idx = visible_idx.unsqueeze(0) if visible_idx.dim() == 1 else visible_idx
        if idx.shape != x.shape[:2]:
            raise ShapeError(f"mask index {tuple(idx.shape)} inconsistent with encoder rows {tuple(x.shape[:2])}")
        if not idx.is_meta and (int(idx.max()) >= int(np.prod(grid)) or int(idx.min()) < 0):
            raise ShapeError("mask index outside the token grid")
        feats, preds = self.decoder(x, idx, grid)
        return (feats[0], preds[0]) if single else (feats, preds)

    def embed_decoded(self, features: Tensor) -> Tensor:
        return self.decoder_embed(features)

    def extract_attention(self, visible: Tensor, branch: str = "video") -> list[Tensor]:
        """Per-layer attention ``(B, heads, V, V)`` (or ``(heads, V, V)`` for one sample)."""
        encoder = {"video": self.video_encoder, "frame": self.frame_encoder}[branch]
        x, single = self._batched(visible)
        if x.shape[-2] < 1:
            raise InputError("attention needs at least one visible token")
        _, maps = encoder(x, return_attention=True)
        return [m[0] for m in maps] if single else maps


def architecture_dimensions(model: DualBranchMAE) -> dict[str, int]:
    """Architecture numbers read back from instantiated parameters."""
    cfg = model.cfg
    return {
        "embed_dim": model.video_embed.out_features,
        "frame_embed_dim": model.frame_embed.out_features,
        "encoder_blocks": len(model.video_encoder.blocks),
        "frame_encoder_blocks": len(model.frame_encoder.blocks),
        "encoder_mlp": model.video_encoder.blocks[0].mlp[0].out_features,
        "encoder_embedding": model.decoder.narrow.out_features,
        "projection": model.video_head.fc2.out_features,
        "decoder_blocks": len(model.decoder.blocks),
        "decoder_mlp": model.decoder.blocks[0].mlp[0].out_features,
        "decoder_output": model.decoder.head.out_features,
        "video_tokens": int(np.prod(cfg.video_grid)),
        "frame_tokens": int(np.prod(cfg.frame_grid)),
    }


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"CVMK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sB4sI")


def save_checkpoint(model: nn.Module, path: str | Path, config_text: str = "") -> None:
    """Write parameters and buffers as float32 arrays with a UTF-8 name table (see README)."""
    state = {k: v.detach().to("cpu", torch.float32).numpy() for k, v in model.state_dict().items()}
    blob = bytearray()
    cfg_bytes = config_text.encode("utf-8")
    blob += _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, b"\0\0\0\0", len(cfg_bytes)) + cfg_bytes
    blob += struct.pack("<I", len(state))
    for name in state:
        raw = name.encode("utf-8")
        blob += struct.pack("<I", len(raw)) + raw
    for arr in state.values():
        blob += struct.pack("<B3x", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def _take(data: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(data):
        raise FormatError(f"truncated {what}", len(data))
    return data[offset:offset + size]


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}", 0)
    _, version, reserved, cfg_len = _CKPT_HEAD.unpack(_take(data, 0, _CKPT_HEAD.size, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if reserved != b"\0\0\0\0":
        raise FormatError("reserved bytes must be zero", 5)
    off = _CKPT_HEAD.size
    config_text = _take(data, off, cfg_len, "config").decode("utf-8")
    off += cfg_len
    (count,) = struct.unpack("<I", _take(data, off, 4, "name count"))
    off += 4
    names = []
    for _ in range(count):
        (n,) = struct.unpack("<I", _take(data, off, 4, "name length"))
        names.append(_take(data, off + 4, n, "name").decode("utf-8"))
        off += 4 + n
    state = {}
    for name in names:
        ndim = _take(data, off, 4, "array header")[0]
        shape = struct.unpack(f"<{ndim}I", _take(data, off + 4, 4 * ndim, "array dims"))
        off += 4 + 4 * ndim
        size = 4 * int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(_take(data, off, size, f"array {name}"), dtype="<f4").reshape(shape).copy()
        off += size
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", off)
    return state, config_text


def load_state(model: nn.Module, state: dict[str, np.ndarray]) -> None:
    own = model.state_dict()
    if set(own) != set(state):
        missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
        raise ConfigError(f"checkpoint does not match model (missing {missing[:3]}, unexpected {extra[:3]})")
    model.load_state_dict({k: torch.from_numpy(v).to(own[k].dtype) for k, v in state.items()})


__all__ = [
    "PRESETS",
    "DualBranchMAE",
    "ModelConfig",
    "ProjectedEmbedding",
    "load_checkpoint",
    "load_state",
    "pool_frame_level",
    "pool_mean",
    "pool_slots",
    "pool_video_level",
    "preset",
    "save_checkpoint",
    "architecture_dimensions",
]
