"""Shared test utilities."""

from __future__ import annotations

import numpy as np
import torch


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def finite_difference_check(fn, inputs, h: float = 1e-4, rtol: float = 1e-4, probes: int = 12, seed: int = 0) -> float:
    """Compare autograd against central differences along random directions.

    Directional derivatives cover every coordinate at once; returns the worst
    relative error and asserts it is within ``rtol``.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    loss = fn(*inputs)
    grads = torch.autograd.grad(loss, inputs, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(probes):
            dirs = [torch.randn(x.shape, generator=gen, dtype=torch.float64) for x in inputs]
            norm = sum(float((d * d).sum()) for d in dirs) ** 0.5
            dirs = [d / norm for d in dirs]
            plus = fn(*[x + h * d for x, d in zip(inputs, dirs)]).item()
            minus = fn(*[x - h * d for x, d in zip(inputs, dirs)]).item()
            numeric = (plus - minus) / (2 * h)
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, err)
    assert worst <= rtol, f"gradient relative error {worst:.3e} > {rtol}"
    return worst
