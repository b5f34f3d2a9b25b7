"""Synthetic clips, CVMT clip files, frame sampling and clip augmentation.

Clips are float32 arrays laid out ``(C, T, H, W)`` with values in ``[0, 1]``;
frames are ``(C, H, W)``. Every random draw goes through a
``numpy.random.Generator`` seeded from an explicit integer so results never
depend on call order or worker count.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, FormatError, InputError

MOTION_CLASSES = ("translating_square", "rotating_bar", "expanding_disc", "static_noise")

CVMT_MAGIC = b"CVMT"
CVMT_VERSION = 1
CVMT_HEADER = struct.Struct("<4sB4s4I")
# refuse payloads above 4 GiB; protects against corrupted headers
_MAX_PAYLOAD_BYTES = 1 << 32


def derive_seed(*keys: int) -> int:
    """Mix integer keys into one 32-bit seed (order-sensitive, platform-stable)."""
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])


def check_clip(clip: np.ndarray, name: str = "clip") -> np.ndarray:
    if not isinstance(clip, np.ndarray) or clip.ndim != 4:
        raise InputError(f"{name} must be a 4-D (C, T, H, W) array")
    if min(clip.shape) < 1:
        raise InputError(f"{name} has an empty axis: {clip.shape}")
    if not np.all(np.isfinite(clip)):
        raise InputError(f"{name} contains non-finite values")
    if clip.min() < 0.0 or clip.max() > 1.0:
        raise InputError(f"{name} values outside [0, 1]")
    return clip


def frame_difference(clip: np.ndarray) -> float:
    """Mean absolute difference between every frame and frame 0."""
    return float(np.abs(clip - clip[:, :1]).mean())


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


def _class_index(motion_class: int | str) -> int:
    if isinstance(motion_class, str):
        if motion_class not in MOTION_CLASSES:
            raise ConfigError(f"unknown motion class {motion_class!r}; expected one of {MOTION_CLASSES}")
        return MOTION_CLASSES.index(motion_class)
    if not 0 <= int(motion_class) < len(MOTION_CLASSES):
        raise ConfigError(f"unknown motion class id {motion_class}")
    return int(motion_class)


def _background(rng: np.random.Generator, C: int, H: int, W: int) -> np.ndarray:
    level = rng.uniform(0.05, 0.3)
    texture = rng.normal(0.0, 0.03, size=(1, H, W))
    return np.clip(np.repeat(level + texture, C, axis=0), 0.0, 0.35)


def _paint(frame: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    frame[:, mask] = color[:, None]


def generate_synthetic_clip(
    shape: Sequence[int],
    motion_class: int | str,
    seed: int,
    velocity: tuple[int, int] | None = None,
) -> np.ndarray:
    """Render a clip whose dominant motion is given by ``motion_class``.

    ``velocity`` pins the (dy, dx) pixel shift per frame of the translating
    square; it is drawn from the seed otherwise.
    """
    if len(shape) != 4 or any(int(s) < 1 for s in shape):
        raise ConfigError(f"clip shape must be four positive ints (C, T, H, W), got {tuple(shape)}")
    C, T, H, W = (int(s) for s in shape)
    if H < 8 or W < 8:
        raise ConfigError(f"synthetic clips need H, W >= 8, got {H}x{W}")
    cls = _class_index(motion_class)
    rng = np.random.default_rng(derive_seed(seed, cls))

    bg = _background(rng, C, H, W)
    # achromatic: hue would let instance discrimination ignore shape and motion
    color = np.full(C, rng.uniform(0.6, 1.0))
    clip = np.repeat(bg[:, None], T, axis=1)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    if cls == 0:
        side = int(rng.integers(max(2, min(H, W) // 6), max(3, min(H, W) // 4) + 1))
        if velocity is None:
            speeds = [s for s in (1, 2) if s * (T - 1) + side <= min(H, W)] or [0]
            speed = int(rng.choice(speeds))
            dirs = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]
            dy, dx = dirs[int(rng.integers(len(dirs)))]
            vy, vx = dy * speed, dx * speed
        else:
            vy, vx = (int(v) for v in velocity)
        span_y, span_x = abs(vy) * (T - 1) + side, abs(vx) * (T - 1) + side
        if span_y > H or span_x > W:
            raise ConfigError(f"velocity {(vy, vx)} leaves the {H}x{W} frame within {T} frames")
        y0 = int(rng.integers(0, H - span_y + 1)) + (abs(vy) * (T - 1) if vy < 0 else 0)
        x0 = int(rng.integers(0, W - span_x + 1)) + (abs(vx) * (T - 1) if vx < 0 else 0)
        for t in range(T):
            y, x = y0 + vy * t, x0 + vx * t
            clip[:, t, y:y + side, x:x + side] = color[:, None, None]
    elif cls == 1:
        cy = H / 2 - 0.5 + rng.uniform(-H / 8, H / 8)
        cx = W / 2 - 0.5 + rng.uniform(-W / 8, W / 8)
        length = 0.7 * min(H, W)
        half_width = max(0.75, min(H, W) / 24)
        theta0 = rng.uniform(0, math.pi)
        omega = rng.choice([-1.0, 1.0]) * rng.uniform(math.pi / 16, math.pi / 8)
        for t in range(T):
            th = theta0 + omega * t
            along = (xx - cx) * math.cos(th) + (yy - cy) * math.sin(th)
            across = -(xx - cx) * math.sin(th) + (yy - cy) * math.cos(th)
            _paint(clip[:, t], (np.abs(along) <= length / 2) & (np.abs(across) <= half_width), color)
    elif cls == 2:
        r_max = min(H, W) / 3
        cy = rng.uniform(r_max, H - r_max)
        cx = rng.uniform(r_max, W - r_max)
        r0 = rng.uniform(1.0, r_max / 3)
        growth = (r_max - r0) / max(T - 1, 1)
        for t in range(T):
            r = r0 + growth * t
            _paint(clip[:, t], (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r, color)
    else:
        # static speckle pattern: same image in every frame
        speckle = rng.uniform(size=(H, W)) < 0.15
        _paint(clip[:, 0], speckle, color)
        clip[:, 1:] = clip[:, :1]

    return np.ascontiguousarray(clip, dtype=np.float32)


def make_synthetic_dataset(
    per_class: int,
    shape: Sequence[int],
    seed: int,
    classes: int = len(MOTION_CLASSES),
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced dataset: ``(clips[N, C, T, H, W], labels[N])`` ordered by class then index."""
    if not 1 <= classes <= len(MOTION_CLASSES):
        raise ConfigError(f"classes must lie in 1..{len(MOTION_CLASSES)}", "data.classes")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1", "data.per_class")
    clips, labels = [], []
    for c in range(classes):
        for i in range(per_class):
            clips.append(generate_synthetic_clip(shape, c, derive_seed(seed, c, i)))
            labels.append(c)
    return np.stack(clips), np.asarray(labels, dtype=np.int64)


# --------------------------------------------------------------------------
# frame sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FramePolicy:
    kind: str = "random"
    n: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("first", "middle", "random"):
            raise ConfigError(f"frame policy kind must be first/middle/random, got {self.kind!r}")
        if self.n < 1:
            raise ConfigError("frame policy needs n >= 1")


def frame_indices(T: int, policy: FramePolicy) -> list[int]:
    if policy.n > T:
        raise ConfigError(f"cannot sample {policy.n} frames from a clip of {T}")
    if policy.kind == "first":
        return list(range(policy.n))
    if policy.kind == "middle":
        start = min(max(T // 2 - policy.n // 2, 0), T - policy.n)
        return list(range(start, start + policy.n))
    rng = np.random.default_rng(policy.seed)
    return sorted(int(i) for i in rng.choice(T, size=policy.n, replace=False))


def sample_frames(clip: np.ndarray, policy: FramePolicy) -> list[tuple[int, np.ndarray]]:
    """Exact temporal slices ``clip[:, j]`` at strictly increasing indices ``j``."""
    return [(j, clip[:, j].copy()) for j in frame_indices(clip.shape[1], policy)]


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    """Per-transform switches and parameters. All flags off is the identity."""

    size: tuple[int, int] | None = None
    crop: bool = False
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip: bool = False
    flip_p: float = 0.5
    color_jitter: bool = False
    jitter_p: float = 0.8
    brightness: float = 0.3
    contrast: float = 0.3
    erase: bool = False
    erase_p: float = 0.25
    erase_area: tuple[float, float] = (0.02, 0.2)
    rotation: bool = False
    max_degrees: float = 10.0
    scaling: bool = False
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation: bool = False
    max_translate: float = 0.1
    temporal_downsample: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_p", "jitter_p", "erase_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability must lie in [0, 1], got {p}", name)
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"crop scale range must lie within (0, 1], got {self.crop_scale}", "crop_scale")
        lo, hi = self.crop_ratio
        if not 0.0 < lo <= hi:
            raise ConfigError(f"bad crop aspect range {self.crop_ratio}", "crop_ratio")
        lo, hi = self.erase_area
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"bad erase area range {self.erase_area}", "erase_area")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise ConfigError(f"bad scale range {self.scale_range}", "scale_range")
        if self.brightness < 0 or self.contrast < 0 or self.max_translate < 0:
            raise ConfigError("jitter strengths and translation must be non-negative")

    def spatial_only(self) -> "AugmentationConfig":
        """Crop and flip only; used on sampled frames."""
        off = {f.name: False for f in fields(self) if f.type == "bool" and f.name not in ("crop", "flip")}
        return replace(self, **off)


def _crop_box(rng: np.random.Generator, H: int, W: int, cfg: AugmentationConfig) -> tuple[int, int, int, int]:
    area = H * W
    log_lo, log_hi = math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= W and 0 < h <= H:
            return int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1)), h, w
    # fallback: central square crop
    side = min(H, W)
    return (H - side) // 2, (W - side) // 2, side, side


def _affine(x: torch.Tensor, theta: np.ndarray) -> torch.Tensor:
    th = torch.as_tensor(theta, dtype=x.dtype).unsqueeze(0).expand(x.shape[0], 2, 3)
    grid = F.affine_grid(th, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def augment_clip(clip: np.ndarray, cfg: AugmentationConfig) -> np.ndarray:
    """Apply the enabled transforms with one parameter draw shared by all frames."""
    check_clip(clip)
    C, T, H, W = clip.shape
    out_h, out_w = cfg.size if cfg.size is not None else (H, W)
    if out_h > H or out_w > W:
        raise ConfigError(f"target crop {out_h}x{out_w} larger than input {H}x{W}", "size")
    rng = np.random.default_rng(cfg.seed)
    # (T, C, H, W) so frames act as the batch axis of torch image ops
    x = torch.from_numpy(np.ascontiguousarray(clip.transpose(1, 0, 2, 3))).double()

    if cfg.crop:
        top, left, h, w = _crop_box(rng, H, W, cfg)
        x = F.interpolate(x[:, :, top:top + h, left:left + w], size=(out_h, out_w), mode="bilinear", align_corners=False)
    elif (out_h, out_w) != (H, W):
        x = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)

    if cfg.flip and rng.uniform() < cfg.flip_p:
        x = torch.flip(x, dims=[3])

    if cfg.rotation or cfg.scaling or cfg.translation:
        angle = math.radians(rng.uniform(-cfg.max_degrees, cfg.max_degrees)) if cfg.rotation else 0.0
        scale = rng.uniform(*cfg.scale_range) if cfg.scaling else 1.0
        tx, ty = (rng.uniform(-cfg.max_translate, cfg.max_translate, size=2) * 2) if cfg.translation else (0.0, 0.0)
        c, s = math.cos(angle) / scale, math.sin(angle) / scale
        x = _affine(x, np.array([[c, -s, tx], [s, c, ty]]))

    if cfg.color_jitter and rng.uniform() < cfg.jitter_p:
        b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        k = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        x = x * b
        mean = x.mean()
        x = (x - mean) * k + mean

    if cfg.erase and rng.uniform() < cfg.erase_p:
        area = out_h * out_w * rng.uniform(*cfg.erase_area)
        eh = max(1, min(out_h, int(round(math.sqrt(area)))))
        ew = max(1, min(out_w, int(round(area / eh))))
        ey, ex = int(rng.integers(0, out_h - eh + 1)), int(rng.integers(0, out_w - ew + 1))
        x = x.clone()
        x[:, :, ey:ey + eh, ex:ex + ew] = float(rng.uniform())

    if cfg.temporal_downsample and T > 1:
        # stride-2 subsample, then repeat to keep the clip length
        x = x[0::2].repeat_interleave(2, dim=0)[:T]

    out = x.clamp(0.0, 1.0).numpy().transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out, dtype=np.float32)


# --------------------------------------------------------------------------
# CVMT files and manifests
# --------------------------------------------------------------------------


def encode_clip(clip: np.ndarray) -> bytes:
    check_clip(clip)
    header = CVMT_HEADER.pack(CVMT_MAGIC, CVMT_VERSION, b"\0\0\0\0", *clip.shape)
    return header + np.ascontiguousarray(clip, dtype="<f4").tobytes()


def decode_clip(data: bytes) -> np.ndarray:
    if len(data) < 4 or data[:4] != CVMT_MAGIC:
        raise FormatError(f"bad magic {bytes(data[:4])!r}, expected {CVMT_MAGIC!r}", 0)
    if len(data) < CVMT_HEADER.size:
        raise FormatError(f"truncated header: {len(data)} of {CVMT_HEADER.size} bytes", len(data))
    _, version, reserved, *dims = CVMT_HEADER.unpack_from(data)
    if version != CVMT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if reserved != b"\0\0\0\0":
        raise FormatError("reserved bytes must be zero", 5)
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError("zero-sized dimension", 9 + 4 * i)
    count = math.prod(dims)
    if count * 4 > _MAX_PAYLOAD_BYTES:
        raise FormatError(f"dimension overflow: {dims} needs {count * 4} bytes", 9)
    expected = CVMT_HEADER.size + 4 * count
    if len(data) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(data)}", len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after payload", expected)
    clip = np.frombuffer(data, dtype="<f4", count=count, offset=CVMT_HEADER.size).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(clip) | (clip < 0) | (clip > 1))
    if bad.size:
        raise FormatError("payload value not finite or outside [0, 1]", CVMT_HEADER.size + 4 * int(bad[0]))
    return clip.reshape(dims)


def write_clip_file(clip: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_clip(clip))


def read_clip_file(path: str | Path) -> np.ndarray:
    return decode_clip(Path(path).read_bytes())


def write_manifest(rows: Iterable[tuple[str, int]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        for p, label in rows:
            writer.writerow([p, int(label)])


def read_manifest(path: str | Path) -> list[tuple[Path, int]]:
    """Rows of ``(clip path, label)``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label"]:
            raise ConfigError(f"manifest header must be 'path,label', got {header}", str(path))
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ConfigError(f"line {lineno}: expected 2 columns", str(path))
            try:
                label = int(row[1])
            except ValueError:
                raise ConfigError(f"line {lineno}: label {row[1]!r} is not an integer", str(path)) from None
            rows.append((path.parent / row[0], label))
    return rows


def load_manifest_clips(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    rows = read_manifest(path)
    if not rows:
        raise ConfigError("manifest lists no clips", str(path))
    clips = [read_clip_file(p) for p, _ in rows]
    shapes = {c.shape for c in clips}
    if len(shapes) != 1:
        raise ConfigError(f"manifest clips have mixed shapes {sorted(shapes)}", str(path))
    return np.stack(clips), np.asarray([label for _, label in rows], dtype=np.int64)


__all__ = [
    "MOTION_CLASSES",
    "AugmentationConfig",
    "FramePolicy",
    "augment_clip",
    "check_clip",
    "decode_clip",
    "derive_seed",
    "encode_clip",
    "frame_difference",
    "frame_indices",
    "generate_synthetic_clip",
    "load_manifest_clips",
    "make_synthetic_dataset",
    "read_clip_file",
    "read_manifest",
    "sample_frames",
    "write_clip_file",
    "write_manifest",
]
