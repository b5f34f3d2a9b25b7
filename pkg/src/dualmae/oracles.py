"""Direct-summation reference implementations in plain Python floats.

These deliberately avoid torch, numpy and log-sum-exp: each loss is written
out term by term so it can check the vectorised versions independently.
"""

from __future__ import annotations

import math
from typing import Sequence

Vector = Sequence[float]


def cosine(a: Vector, b: Vector) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def contrastive_term(anchor: Sequence[Vector], positive: Sequence[Vector], i: int, tau: float) -> float:
    numerator = math.exp(cosine(anchor[i], positive[i]) / tau)
    denominator = 0.0
    for k in range(len(anchor)):
        if k != i:
            denominator += math.exp(cosine(anchor[i], anchor[k]) / tau)
    for k in range(len(positive)):
        denominator += math.exp(cosine(anchor[i], positive[k]) / tau)
    return -math.log(numerator / denominator)


def nt_xent(z1: Sequence[Vector], z2: Sequence[Vector], tau: float) -> list[float]:
    return [contrastive_term(z1, z2, i, tau) for i in range(len(z1))]


def cross_level(z: Sequence[Vector], h: Sequence[Vector], tau: float) -> list[float]:
    return [contrastive_term(z, h, i, tau) for i in range(len(z))]


def mean_views(z1: Sequence[Vector], z2: Sequence[Vector]) -> list[list[float]]:
    return [[(a + b) / 2 for a, b in zip(r1, r2)] for r1, r2 in zip(z1, z2)]


def intra(zu1, zu2, zf1, zf2, tau: float) -> float:
    B = len(zu1)
    total = 0.0
    for i in range(B):
        total += contrastive_term(zu1, zu2, i, tau) + contrastive_term(zf1, zf2, i, tau)
    return total / (2 * B)


def cross(zu, hu, zf, hf, tau: float) -> float:
    B = len(zu)
    total = 0.0
    for i in range(B):
        total += contrastive_term(zu, hu, i, tau) + contrastive_term(zf, hf, i, tau)
    return total / (2 * B)


def mean_squared(a: Sequence[float], b: Sequence[float]) -> float:
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def reconstruction(u1, p1, u2, p2) -> float:
    """Each argument: list over the batch of flat pixel lists."""
    B = len(u1)
    return sum(mean_squared(u1[i], p1[i]) + mean_squared(u2[i], p2[i]) for i in range(B)) / B


def mse(e1, e2) -> float:
    """Each argument: list over the batch of flat decoder-embedding lists."""
    return sum(mean_squared(a, b) for a, b in zip(e1, e2)) / len(e1)


def total(l_intra: float, l_cross: float, l_mse: float, l_rl: float, lambda_c: float) -> float:
    return lambda_c * (l_intra + l_cross) + l_rl + l_mse


def ranking(queries: Sequence[Vector], gallery: Sequence[Vector]) -> list[list[int]]:
    """Gallery indices by decreasing cosine similarity, ties broken by index."""
    out = []
    for q in queries:
        sims = [(-cosine(q, g), k) for k, g in enumerate(gallery)]
        out.append([k for _, k in sorted(sims)])
    return out
