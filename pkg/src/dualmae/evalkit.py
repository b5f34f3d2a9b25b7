"""Frozen-encoder evaluation: clip embeddings, linear probe, retrieval, figures."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import DualBranchMAE, pool_mean
from .errors import ConfigError, InputError
from .masking import sample_mask
from .tokenizer import patchify, unpatchify


# --------------------------------------------------------------------------
# embeddings
# --------------------------------------------------------------------------


@torch.no_grad()
def embed_clips(model: DualBranchMAE, clips: np.ndarray, batch_size: int = 64, normalize: tuple[float, float] | None = None) -> np.ndarray:
    """Unmasked video-branch embeddings (tokenize, encode, project, mean-pool), shape ``(N, proj_dim)``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(clips), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(clips[start:start + batch_size])).to(dtype)
        if normalize is not None:
            x = (x - normalize[0]) / normalize[1]
        tokens, _ = model.tokenize_video(x)
        out.append(pool_mean(model.project(model.encode_video(tokens), "video")))
    return torch.cat(out).double().numpy()


def embed_clip(model: DualBranchMAE, clip: np.ndarray) -> np.ndarray:
    return embed_clips(model, clip[None])[0]


# --------------------------------------------------------------------------
# linear probe
# --------------------------------------------------------------------------


@dataclass
class ProbeResult:
    top1: float
    per_class: dict[int, float]
    seed: int
    config: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return json.dumps(d, sort_keys=True)


def linear_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    seed: int = 0,
    steps: int = 300,
    lr: float = 0.1,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> ProbeResult:
    """Softmax classifier on standardised frozen features; full-batch SGD with momentum and cosine decay."""
    classes = np.unique(np.concatenate([train_y, test_y]))
    if len(np.unique(train_y)) < 2:
        raise ConfigError("linear probe needs at least two classes in the training split")
    if not (np.all(np.isfinite(train_x)) and np.all(np.isfinite(test_x))):
        raise InputError("embeddings must be finite")
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-8
    xtr = torch.as_tensor((train_x - mu) / sd, dtype=torch.float64)
    xte = torch.as_tensor((test_x - mu) / sd, dtype=torch.float64)
    ytr = torch.as_tensor(train_y, dtype=torch.long)
    k = int(classes.max()) + 1

    gen = torch.Generator().manual_seed(int(seed))
    layer = torch.nn.Linear(xtr.shape[1], k, dtype=torch.float64)
    with torch.no_grad():
        layer.weight.normal_(0.0, 0.01, generator=gen)
        layer.bias.zero_()
    opt = torch.optim.SGD(layer.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    for _ in range(steps):
        opt.zero_grad()
        F.cross_entropy(layer(xtr), ytr).backward()
        opt.step()
        sched.step()
    with torch.no_grad():
        pred = layer(xte).argmax(dim=1).numpy()
    correct = pred == test_y
    per_class = {int(c): float(correct[test_y == c].mean()) for c in classes if np.any(test_y == c)}
    echo = {"steps": steps, "lr": lr, "momentum": momentum, "weight_decay": weight_decay}
    return ProbeResult(float(correct.mean()), per_class, int(seed), echo)


def split_indices(labels: np.ndarray, train_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test split."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = int(round(train_frac * len(idx)))
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# --------------------------------------------------------------------------
# retrieval
# --------------------------------------------------------------------------


@dataclass
class RetrievalResult:
    r1: float
    r5: float
    gallery_size: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def rank_gallery(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices sorted by decreasing cosine similarity (stable on ties)."""
    q = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    g = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    return np.argsort(-(q @ g.T), axis=1, kind="stable")


def retrieve(
    queries: np.ndarray,
    query_labels: Sequence[int],
    gallery: np.ndarray,
    gallery_labels: Sequence[int],
    query_ids: Sequence[Any] | None = None,
    gallery_ids: Sequence[Any] | None = None,
) -> RetrievalResult:
    """Recall@1/5 with cosine nearest neighbours; gallery items sharing the query's id are skipped."""
    if len(gallery) == 0:
        raise InputError("gallery is empty")
    order = rank_gallery(np.asarray(queries, dtype=np.float64), np.asarray(gallery, dtype=np.float64))
    glabels = np.asarray(gallery_labels)
    hits1 = hits5 = 0
    for qi, ranked in enumerate(order):
        if query_ids is not None and gallery_ids is not None:
            ranked = [k for k in ranked if gallery_ids[k] != query_ids[qi]]
        top = glabels[list(ranked[:5])]
        hits1 += bool(len(top) and top[0] == query_labels[qi])
        hits5 += bool(np.any(top == query_labels[qi]))
    n = len(order)
    return RetrievalResult(hits1 / n, hits5 / n, len(gallery))


# --------------------------------------------------------------------------
# figures
# --------------------------------------------------------------------------


def _rgb(x: np.ndarray) -> np.ndarray:
    """``(C, ..., H, W)`` in [0, 1] -> ``(..., H, W, 3)``."""
    if x.shape[0] == 3:
        rgb = x
    elif x.shape[0] == 1:
        rgb = np.repeat(x, 3, axis=0)
    else:
        rgb = np.repeat(x.mean(axis=0, keepdims=True), 3, axis=0)
    return np.moveaxis(rgb, 0, -1)


@torch.no_grad()
def attention_heatmap(model: DualBranchMAE, clip: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Per-pixel attention received, ``(T, H, W)`` in ``[0, 255]`` (uint8), min-max scaled per frame.

    Last encoder layer, mean over heads, column mean over query tokens; masked
    tubelets receive zero before scaling.
    """
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    tokens, grid = model.tokenize_video(torch.from_numpy(clip[None]).to(dtype))
    vis = torch.as_tensor(visible)
    attn = model.extract_attention(tokens[0, vis], "video")[-1]
    received = attn.mean(dim=0).mean(dim=0).double()
    scores = torch.zeros(int(np.prod(grid)), dtype=torch.float64)
    scores[vis] = received
    gt, gh, gw = grid
    vol = scores.reshape(gt, gh, gw).numpy()
    vol = np.repeat(np.repeat(np.repeat(vol, cfg.patch_t, 0), cfg.patch_h, 1), cfg.patch_w, 2)
    out = np.zeros(vol.shape, dtype=np.uint8)
    for t, frame in enumerate(vol):
        lo, hi = frame.min(), frame.max()
        if hi > lo:
            out[t] = np.round((frame - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return out


@torch.no_grad()
def figure_panel(model: DualBranchMAE, clip: np.ndarray, mask_ratio: float, seed: int = 0) -> np.ndarray:
    """RGB uint8 image with rows original / masked / reconstruction / heatmap / overlay and one column per frame."""
    import matplotlib

    cfg = model.cfg
    C, T, H, W = clip.shape
    grid = cfg.patch.grid(T, H, W)
    mask = sample_mask(grid, mask_ratio, "random", seed)
    if len(mask.visible_indices) == 0:
        raise ConfigError("figure needs at least one visible token", "eval.mask_ratio")
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(clip[None]).to(dtype)
    tokens, _ = model.tokenize_video(x)
    vis = torch.as_tensor(mask.visible_indices)[None]
    feats = model.encode_video(tokens[:, vis[0]])
    _, pred = model.decode(feats, vis, grid)
    recon = unpatchify(pred[0].double(), grid, cfg.patch, C).clamp(0, 1).numpy()

    patches = patchify(torch.from_numpy(clip).double(), cfg.patch)
    patches[torch.as_tensor(mask.masked_indices)] = 0.5
    masked = unpatchify(patches, grid, cfg.patch, C).numpy()

    heat = attention_heatmap(model, clip, mask.visible_indices)
    heat_rgb = matplotlib.colormaps["jet"](heat / 255.0)[..., :3]
    original = _rgb(clip)
    overlay = 0.5 * original + 0.5 * heat_rgb
    rows = [original, _rgb(masked), _rgb(recon), np.repeat(heat[..., None] / 255.0, 3, axis=-1), overlay]
    panel = np.concatenate([np.concatenate(list(r), axis=1) for r in rows], axis=0)
    return np.round(np.clip(panel, 0, 1) * 255).astype(np.uint8)


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    h, w, _ = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def write_image(image: np.ndarray, path: str | Path) -> Path:
    """PNG through matplotlib for ``.png`` paths, binary PPM otherwise."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            import matplotlib.image

            matplotlib.image.imsave(path, image, format="png", metadata={"Software": None})
        else:
            write_ppm(image, path)
    except OSError as exc:
        raise OSError(f"cannot write figure to {path}: {exc.strerror or exc}") from exc
    return path


def export_figure(model: DualBranchMAE, clip: np.ndarray, mask_ratio: float, out_path: str | Path, seed: int = 0) -> Path:
    return write_image(figure_panel(model, clip, mask_ratio, seed), out_path)


__all__ = [
    "ProbeResult",
    "RetrievalResult",
    "attention_heatmap",
    "embed_clip",
    "embed_clips",
    "export_figure",
    "figure_panel",
    "linear_probe",
    "rank_gallery",
    "retrieve",
    "split_indices",
    "write_image",
    "write_ppm",
]
