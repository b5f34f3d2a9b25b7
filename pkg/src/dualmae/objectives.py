"""Contrastive, prediction and reconstruction losses and the weighted total.

All contrastive terms share one form: for anchor rows ``a`` and positive rows
``p`` (both ``B x D``) with cosine similarity ``s`` and temperature ``tau``::

    loss_i = -log( exp(s(a_i, p_i)/tau)
                   / (sum_{k != i} exp(s(a_i, a_k)/tau) + sum_k exp(s(a_i, p_k)/tau)) )

evaluated with log-sum-exp so that small temperatures do not overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor

from .errors import ConfigError, InputError, NumericError, ShapeError


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _unit_rows(z: Tensor, name: str) -> Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise InputError(f"{name} has a zero-norm row; cosine similarity undefined")
    return z / norms


def _check_pair(a: Tensor, b: Tensor, tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}", "loss.tau")
    if a.dim() != 2 or a.shape != b.shape:
        raise ShapeError(f"contrastive views must be matching (B, D) arrays, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[0] < 1:
        raise InputError("contrastive batch is empty")


def contrastive_rows(anchor, positive, tau: float) -> Tensor:
    """Per-row loss of ``anchor`` against ``positive`` (the shared NT-Xent form)."""
    a, p = _t(anchor), _t(positive)
    _check_pair(a, p, tau)
    ua, up = _unit_rows(a, "anchor"), _unit_rows(p, "positive")
    same = ua @ ua.T / tau
    cross = ua @ up.T / tau
    eye = torch.eye(a.shape[0], dtype=torch.bool, device=a.device)
    same = same.masked_fill(eye, float("-inf"))
    log_denominator = torch.logsumexp(torch.cat([same, cross], dim=1), dim=1)
    return log_denominator - cross.diagonal()


def nt_xent(z1, z2, tau: float, anchor_view: int = 1) -> Tensor:
    """Per-sample losses ``L(i, 1, 2)``; ``anchor_view=2`` swaps the roles of the views."""
    if anchor_view not in (1, 2):
        raise ConfigError(f"anchor_view must be 1 or 2, got {anchor_view}")
    return contrastive_rows(z1, z2, tau) if anchor_view == 1 else contrastive_rows(z2, z1, tau)


def _per_sample(fn, a: Tensor, b: Tensor, tau: float) -> Tensor:
    # (B, n, D) stacks n sampled frames; average their per-sample terms
    if a.dim() == 3:
        if a.shape != b.shape:
            raise ShapeError(f"frame stacks differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        return torch.stack([fn(a[:, r], b[:, r], tau) for r in range(a.shape[1])]).mean(dim=0)
    return fn(a, b, tau)


def intra_loss(zu1, zu2, zf1, zf2, tau: float) -> Tensor:
    """``(1/2B) * sum_i [L_u(i) + L_f(i)]`` over video-level and frame-level view pairs."""
    zu1, zu2, zf1, zf2 = map(_t, (zu1, zu2, zf1, zf2))
    if zu1.shape[0] != zf1.shape[0]:
        raise ShapeError(f"video batch {zu1.shape[0]} != frame batch {zf1.shape[0]}")
    B = zu1.shape[0]
    return (nt_xent(zu1, zu2, tau).sum() + _per_sample(nt_xent, zf1, zf2, tau).sum()) / (2 * B)


def mean_views(z1, z2) -> Tensor:
    z1, z2 = _t(z1), _t(z2)
    if z1.shape != z2.shape:
        raise ShapeError(f"views differ in shape: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    return 0.5 * (z1 + z2)


def cross_loss_level(z, h, tau: float) -> Tensor:
    """Per-sample ``C(i, 1, 2)``: video-branch means ``z`` anchored against frame-branch ``h``."""
    return contrastive_rows(z, h, tau)


def cross_loss(zu, hu, zf, hf, tau: float) -> Tensor:
    """``(1/2B) * sum_i [C_u(i) + C_f(i)]``."""
    zu, hu, zf, hf = map(_t, (zu, hu, zf, hf))
    if zu.shape[0] != zf.shape[0]:
        raise ShapeError(f"video batch {zu.shape[0]} != frame batch {zf.shape[0]}")
    B = zu.shape[0]
    return (cross_loss_level(zu, hu, tau).sum() + _per_sample(cross_loss_level, zf, hf, tau).sum()) / (2 * B)


Embedder = Callable[[Tensor], Tensor]


def pred_loss(fd1, fd2, e_u: Embedder | None = None) -> Tensor:
    """Squared distance between decoder embeddings, averaged over elements."""
    fd1, fd2 = _t(fd1), _t(fd2)
    if fd1.shape != fd2.shape:
        raise ShapeError(f"decoder outputs differ in shape: {tuple(fd1.shape)} vs {tuple(fd2.shape)}")
    if e_u is not None:
        fd1, fd2 = e_u(fd1), e_u(fd2)
    return ((fd1 - fd2) ** 2).mean()


def mse_loss(fd1, fd2, e_u: Embedder | None = None) -> Tensor:
    """Batch mean of :func:`pred_loss` over the leading axis."""
    fd1, fd2 = _t(fd1), _t(fd2)
    if fd1.shape != fd2.shape:
        raise ShapeError(f"decoder outputs differ in shape: {tuple(fd1.shape)} vs {tuple(fd2.shape)}")
    if e_u is not None:
        fd1, fd2 = e_u(fd1), e_u(fd2)
    return ((fd1 - fd2) ** 2).flatten(1).mean(dim=1).mean()


def _sq_err(target: Tensor, pred: Tensor, weight: Tensor | None) -> Tensor:
    if target.shape != pred.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} does not match target {tuple(target.shape)}")
    err = (target - pred) ** 2
    if weight is None:
        return err.flatten(1).mean(dim=1)
    # weight: (B, N) over tokens of (B, N, P) patch tensors
    w = weight.to(err.dtype).unsqueeze(-1)
    return (err * w).flatten(1).sum(dim=1) / (w.flatten(1).sum(dim=1) * err.shape[-1]).clamp(min=1)


def reconstruction_loss(u1, u1_hat, u2, u2_hat, weight1=None, weight2=None) -> Tensor:
    """``(1/B) * sum_i (|u1 - u1_hat|^2 + |u2 - u2_hat|^2)`` with per-element means inside each norm.

    Optional ``(B, N)`` token weights restrict the error to masked tokens.
    """
    u1, u1_hat, u2, u2_hat = map(_t, (u1, u1_hat, u2, u2_hat))
    return (_sq_err(u1, u1_hat, weight1) + _sq_err(u2, u2_hat, weight2)).mean()


@dataclass
class LossBreakdown:
    l_intra: float
    l_cross: float
    l_mse: float
    l_rl: float
    lambda_c: float
    total: float
    tensor: Tensor | None = None

    def as_row(self) -> dict[str, float]:
        return {"L_intra": self.l_intra, "L_cross": self.l_cross, "L_mse": self.l_mse, "L_rl": self.l_rl, "total": self.total}


def total_loss(l_intra, l_cross, l_mse, l_rl, lambda_c: float = 1.0) -> LossBreakdown:
    """Weighted sum ``lambda_c * (intra + cross) + rl + mse``; tensors keep the graph in ``.tensor``."""
    parts = {"L_intra": l_intra, "L_cross": l_cross, "L_mse": l_mse, "L_rl": l_rl}
    values = {}
    for name, v in parts.items():
        x = float(v.detach()) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(x):
            raise NumericError(name, x)
        values[name] = x
    if not math.isfinite(lambda_c):
        raise NumericError("lambda_c", lambda_c)
    total = lambda_c * (values["L_intra"] + values["L_cross"]) + values["L_rl"] + values["L_mse"]
    tensor = None
    if any(isinstance(v, Tensor) and v.requires_grad for v in parts.values()):
        tensor = lambda_c * (_t(l_intra) + _t(l_cross)) + _t(l_rl) + _t(l_mse)
    return LossBreakdown(values["L_intra"], values["L_cross"], values["L_mse"], values["L_rl"], float(lambda_c), total, tensor)


__all__ = [
    "LossBreakdown",
    "contrastive_rows",
    "cross_loss",
    "cross_loss_level",
    "intra_loss",
    "mean_views",
    "mse_loss",
    "nt_xent",
    "pred_loss",
    "reconstruction_loss",
    "total_loss",
]
