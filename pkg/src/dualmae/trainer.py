"""Joint pre-training loop, learning-rate schedule and test-time adaptation.

One training step takes a batch of raw clips and:

1. builds an augmented second view of every clip and samples frames from the raw clip;
2. tokenizes and masks both video views and the frames;
3. encodes, projects and pools video-level and frame-level embeddings;
4. decodes both views;
5. evaluates intra-modal, cross-modal, decoder-embedding and reconstruction
   losses and applies one AdamW update on their weighted total.

Randomness for sample ``b`` at step ``s`` comes from ``derive_seed(seed, s, b, stream)``
so results do not depend on batch composition order or worker count.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import Tensor

from .backbone import DualBranchMAE, ModelConfig, pool_mean, pool_slots, preset, save_checkpoint
from .config import dump_config
from .datakit import AugmentationConfig, FramePolicy, augment_clip, derive_seed, frame_indices, make_synthetic_dataset
from .errors import ConfigError, InputError, NumericError
from .masking import sample_mask
from .objectives import LossBreakdown, cross_loss, intra_loss, mean_views, mse_loss, reconstruction_loss, total_loss
from .tokenizer import patchify

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_intra", "L_cross", "L_mse", "L_rl", "total", "lr", "grad_norm")

# per-sample random streams
_AUG, _FRAMES, _FRAME_AUG, _MASK1, _MASK2, _MASK_IMG = range(1, 7)


def model_config(cfg: Mapping[str, Any]) -> ModelConfig:
    return preset(
        cfg["model.preset"],
        channels=cfg["data.channels"],
        frames=cfg["data.frames"],
        height=cfg["data.height"],
        width=cfg["data.width"],
        patch_t=cfg["patch.t"],
        patch_h=cfg["patch.h"],
        patch_w=cfg["patch.w"],
        dim=cfg["model.dim"],
        depth=cfg["model.depth"],
        heads=cfg["model.heads"],
        proj_dim=cfg["model.proj_dim"],
        dec_dim=cfg["model.dec_dim"],
        dec_depth=cfg["model.dec_depth"],
        dec_heads=cfg["model.dec_heads"],
        embed_dim=cfg["model.embed_dim"],
    )


def clip_shape(cfg: Mapping[str, Any]) -> tuple[int, int, int, int]:
    m = model_config(cfg)
    return (m.channels, m.frames, m.height, m.width)


def augmentation_config(cfg: Mapping[str, Any], seed: int) -> AugmentationConfig:
    return AugmentationConfig(
        crop=cfg["aug.crop"],
        crop_scale=(cfg["aug.crop_scale_min"], cfg["aug.crop_scale_max"]),
        flip=cfg["aug.flip"],
        flip_p=cfg["aug.flip_p"],
        color_jitter=cfg["aug.color_jitter"],
        jitter_p=cfg["aug.jitter_p"],
        brightness=cfg["aug.brightness"],
        contrast=cfg["aug.contrast"],
        erase=cfg["aug.erase"],
        erase_p=cfg["aug.erase_p"],
        rotation=cfg["aug.rotation"],
        max_degrees=cfg["aug.max_degrees"],
        scaling=cfg["aug.scaling"],
        translation=cfg["aug.translation"],
        max_translate=cfg["aug.max_translate"],
        temporal_downsample=cfg["aug.temporal_downsample"],
        seed=seed,
    )


def build_model(cfg: Mapping[str, Any]) -> DualBranchMAE:
    torch.manual_seed(derive_seed(cfg["seed"], 0xB0DE))
    model = DualBranchMAE(model_config(cfg))
    if cfg["train.freeze_image_branch"]:
        for module in model.image_branch():
            module.requires_grad_(False)
    return model


def synthetic_data(cfg: Mapping[str, Any], split: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """The configured synthetic set; ``split`` selects an independent draw."""
    return make_synthetic_dataset(cfg["data.per_class"], clip_shape(cfg), derive_seed(cfg["seed"], 0xDA7A, split), cfg["data.classes"])


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------


def warmup_steps(cfg: Mapping[str, Any]) -> int:
    return int(round(cfg["train.warmup_frac"] * cfg["train.steps"]))


def peak_lr(cfg: Mapping[str, Any]) -> float:
    return cfg["train.base_lr"] * cfg["train.batch_size"] / 256


def lr_at(step: int, cfg: Mapping[str, Any]) -> float:
    """Linear warmup from 0 to the batch-scaled peak, then half-cosine decay to 0 at ``train.steps``."""
    total, warmup = cfg["train.steps"], warmup_steps(cfg)
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]", "train.steps")
    peak = peak_lr(cfg)
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------


def _model_input(x: np.ndarray, cfg: Mapping[str, Any], dtype: torch.dtype) -> Tensor:
    t = torch.from_numpy(np.ascontiguousarray(x)).to(dtype)
    if cfg["data.normalize"]:
        t = (t - cfg["data.norm_mean"]) / cfg["data.norm_std"]
    return t


def _visible_index(grid, ratio: float, strategy: str, seeds: list[int]) -> tuple[Tensor, Tensor]:
    specs = [sample_mask(grid, ratio, strategy, s) for s in seeds]
    if len(specs[0].visible_indices) == 0:
        raise InputError(f"masking ratio {ratio} leaves no visible token on grid {grid}")
    visible = torch.as_tensor(np.stack([m.visible_indices for m in specs]))
    masked = torch.stack([torch.as_tensor(~m.visible_mask()) for m in specs])
    return visible, masked


def _gather(tokens: Tensor, index: Tensor) -> Tensor:
    return tokens.gather(1, index.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


@dataclass
class ForwardResult:
    losses: LossBreakdown
    frame_index: np.ndarray
    predictions: tuple[Tensor, Tensor]
    fallback_slots: int


def compute_losses(model: DualBranchMAE, clips: np.ndarray, cfg: Mapping[str, Any], seed: int) -> ForwardResult:
    """All loss terms for a ``(B, C, T, H, W)`` batch of raw clips."""
    if clips.ndim != 5 or clips.shape[0] < 1:
        raise InputError("expected a non-empty (B, C, T, H, W) batch")
    B, C, T = clips.shape[:3]
    dtype = next(model.parameters()).dtype
    patch = model.cfg.patch

    aug = [augment_clip(clips[b], augmentation_config(cfg, derive_seed(seed, b, _AUG))) for b in range(B)]
    policy_kind, n = cfg["data.frame_policy"], cfg["data.n_frames"]
    idx = np.array([frame_indices(T, FramePolicy(policy_kind, n, derive_seed(seed, b, _FRAMES))) for b in range(B)])
    frames = clips[np.arange(B)[:, None], :, idx].reshape(B * n, C, *clips.shape[3:])
    if cfg["data.frame_augment"]:
        frames = np.stack([
            augment_clip(f[:, None], augmentation_config(cfg, derive_seed(seed, i // n, _FRAME_AUG, i % n)).spatial_only())[:, 0]
            for i, f in enumerate(frames)
        ])

    v1 = _model_input(clips, cfg, dtype)
    v2 = _model_input(np.stack(aug), cfg, dtype)
    fr = _model_input(frames, cfg, dtype)

    tok1, grid = model.tokenize_video(v1)
    tok2, _ = model.tokenize_video(v2)
    ratio, strategy = cfg["mask.video.ratio"], cfg["mask.video.strategy"]
    vis1, masked1 = _visible_index(grid, ratio, strategy, [derive_seed(seed, b, _MASK1) for b in range(B)])
    if cfg["mask.share_across_views"]:
        vis2, masked2 = vis1, masked1
    else:
        vis2, masked2 = _visible_index(grid, ratio, strategy, [derive_seed(seed, b, _MASK2) for b in range(B)])

    fe1 = model.encode_video(_gather(tok1, vis1))
    fe2 = model.encode_video(_gather(tok2, vis2))
    p1, p2 = model.project(fe1, "video"), model.project(fe2, "video")
    zu1, zu2 = pool_mean(p1), pool_mean(p2)
    slots1, empty1 = pool_slots(p1, vis1, grid)
    slots2, empty2 = pool_slots(p2, vis2, grid)
    slot_idx = torch.as_tensor(idx // patch.t)
    rows = torch.arange(B)[:, None]
    zf1, zf2 = slots1[rows, slot_idx], slots2[rows, slot_idx]

    ftok, fgrid = model.tokenize_frames(fr)
    fvis, _ = _visible_index(
        fgrid, cfg["mask.image.ratio"], cfg["mask.image.strategy"],
        [derive_seed(seed, i // n, _MASK_IMG, i % n) for i in range(B * n)],
    )
    hf = pool_mean(model.project(model.encode_frame(_gather(ftok, fvis)), "frame")).reshape(B, n, -1)
    hu = hf.mean(dim=1)
    if n == 1:
        zf1, zf2, hf = zf1[:, 0], zf2[:, 0], hf[:, 0]

    tau = cfg["loss.tau"]
    l_intra = intra_loss(zu1, zu2, zf1, zf2, tau)
    l_cross = cross_loss(mean_views(zu1, zu2), hu, mean_views(zf1, zf2), hf, tau)

    fd1, pred1 = model.decode(fe1, vis1, grid)
    fd2, pred2 = model.decode(fe2, vis2, grid)
    l_mse = mse_loss(fd1, fd2, model.embed_decoded)
    w1, w2 = (masked1, masked2) if cfg["loss.recon_masked_only"] else (None, None)
    l_rl = reconstruction_loss(patchify(v1, patch), pred1, patchify(v2, patch), pred2, w1, w2)

    losses = total_loss(l_intra, l_cross, l_mse, l_rl, cfg["loss.lambda_c"])
    fallback = int(empty1[rows, slot_idx].sum() + empty2[rows, slot_idx].sum())
    return ForwardResult(losses, idx, (pred1, pred2), fallback)


def evaluate_loss(model: DualBranchMAE, clips: np.ndarray, cfg: Mapping[str, Any], seed: int) -> LossBreakdown:
    with torch.no_grad():
        return compute_losses(model, clips, cfg, seed).losses


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


@dataclass
class StepReport:
    step: int
    losses: LossBreakdown
    grad_norm: float
    lr: float

    def row(self) -> list[str]:
        r = self.losses
        vals = (r.l_intra, r.l_cross, r.l_mse, r.l_rl, r.total, self.lr, self.grad_norm)
        return [str(self.step)] + [repr(float(v)) for v in vals]


def make_optimizer(params, cfg: Mapping[str, Any], lr: float = 0.0, weight_decay: float | None = None) -> torch.optim.AdamW:
    params = [p for p in params if p.requires_grad]
    wd = cfg["train.weight_decay"] if weight_decay is None else weight_decay
    return torch.optim.AdamW(params, lr=lr, betas=(cfg["train.beta1"], cfg["train.beta2"]), weight_decay=wd)


def _apply_update(model: DualBranchMAE, optimizer: torch.optim.Optimizer, loss: Tensor, clip: float, lr: float) -> float:
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    if clip > 0:
        norm = float(torch.nn.utils.clip_grad_norm_(params, clip))
    else:
        norm = float(torch.linalg.vector_norm(torch.stack([p.grad.norm() for p in params if p.grad is not None])))
    if not math.isfinite(norm):
        raise NumericError("grad_norm", norm)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return norm


def pretrain_step(
    model: DualBranchMAE,
    optimizer: torch.optim.Optimizer,
    clips: np.ndarray,
    cfg: Mapping[str, Any],
    step: int,
) -> StepReport:
    """One update at 1-based ``step`` using ``lr_at(step)``."""
    if len(clips) < 1:
        raise InputError("empty batch")
    if len(clips) == 1:
        logger.warning("batch size 1: contrastive losses are identically zero")
    model.train()
    result = compute_losses(model, clips, cfg, derive_seed(cfg["seed"], step))
    lr = lr_at(step, cfg)
    loss = result.losses.tensor
    if loss is None:
        raise InputError("model has no trainable parameters")
    norm = _apply_update(model, optimizer, loss, cfg["train.clip_grad"], lr)
    result.losses.tensor = None
    return StepReport(step, result.losses, norm, lr)


def batch_indices(n_items: int, step: int, cfg: Mapping[str, Any]) -> np.ndarray:
    B = cfg["train.batch_size"]
    rng = np.random.default_rng(derive_seed(cfg["seed"], step, 0xBA7C))
    return np.sort(rng.choice(n_items, size=B, replace=B > n_items))


class Trainer:
    """Owns model, optimizer and data for a pre-training run."""

    def __init__(self, cfg: Mapping[str, Any], clips: np.ndarray | None = None, model: DualBranchMAE | None = None):
        self.cfg = dict(cfg)
        self.model = model if model is not None else build_model(self.cfg)
        self.optimizer = make_optimizer(self.model.parameters(), self.cfg)
        self.clips = clips if clips is not None else synthetic_data(self.cfg)[0]
        self.step = 0
        self.history: list[StepReport] = []

    def train_step(self) -> StepReport:
        if self.step >= self.cfg["train.steps"]:
            raise ConfigError("schedule exhausted", "train.steps")
        self.step += 1
        batch = self.clips[batch_indices(len(self.clips), self.step, self.cfg)]
        report = pretrain_step(self.model, self.optimizer, batch, self.cfg, self.step)
        self.history.append(report)
        return report

    def run(self, steps: int | None = None, out_dir: str | Path | None = None) -> list[StepReport]:
        steps = self.cfg["train.steps"] - self.step if steps is None else steps
        writer, fh = None, None
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            fh = open(out / "loss_log.csv", "w", newline="", encoding="utf-8")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
        every = self.cfg["train.checkpoint_every"]
        try:
            for _ in range(steps):
                report = self.train_step()
                if writer is not None:
                    writer.writerow(report.row())
                    if every and self.step % every == 0:
                        self.save(Path(out_dir) / f"checkpoint_{self.step:06d}.ckpt")
                logger.debug("step %d total %.4f lr %.3g", report.step, report.losses.total, report.lr)
        finally:
            if fh is not None:
                fh.close()
        if out_dir is not None:
            self.save(Path(out_dir) / "checkpoint.ckpt")
        return self.history

    def save(self, path: str | Path) -> None:
        save_checkpoint(self.model, path, dump_config(self.cfg))


def moving_average(values, window: int = 5) -> np.ndarray:
    """Trailing mean over up to ``window`` values ending at each position."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# --------------------------------------------------------------------------
# test-time adaptation
# --------------------------------------------------------------------------


def _tta_params(model: DualBranchMAE, scope: str):
    if scope == "encoder":
        return [p for m in model.video_encoder_modules() for p in m.parameters()]
    return list(model.parameters())


def tta_adapt(model: DualBranchMAE, clips: np.ndarray, cfg: Mapping[str, Any], seed: int | None = None) -> DualBranchMAE:
    """``tta.steps`` updates of the full objective on ``clips`` alone.

    Works on a deep copy unless ``tta.persist`` is set.
    """
    steps = cfg["tta.steps"]
    if steps < 0:
        raise ConfigError("must be >= 0", "tta.steps")
    adapted = model if cfg["tta.persist"] else copy.deepcopy(model)
    if steps == 0:
        return adapted
    seed = cfg["seed"] if seed is None else seed
    optimizer = make_optimizer(_tta_params(adapted, cfg["tta.scope"]), cfg, lr=cfg["tta.lr"], weight_decay=0.0)
    adapted.train()
    for k in range(steps):
        losses = compute_losses(adapted, clips, cfg, derive_seed(seed, k, 0x77A)).losses
        _apply_update(adapted, optimizer, losses.tensor, cfg["train.clip_grad"], cfg["tta.lr"])
    return adapted


__all__ = [
    "LOG_COLUMNS",
    "ForwardResult",
    "StepReport",
    "Trainer",
    "augmentation_config",
    "batch_indices",
    "build_model",
    "clip_shape",
    "compute_losses",
    "evaluate_loss",
    "lr_at",
    "make_optimizer",
    "model_config",
    "moving_average",
    "peak_lr",
    "pretrain_step",
    "synthetic_data",
    "tta_adapt",
    "warmup_steps",
]
