"""Quadrature rules on the reference triangle.

Points are barycentric triples (l0, l1, l2); weights sum to one so that
``sum(w * f) * area`` integrates over a physical triangle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@dataclass(frozen=True)
class TriangleRule:
    bary: np.ndarray  # (nq, 3)
    weights: np.ndarray  # (nq,), sum = 1
    degree: int

    @property
    def size(self) -> int:
        return len(self.weights)


@lru_cache(maxsize=None)
def seven_point() -> TriangleRule:
    """Symmetric 7-point rule, exact for polynomials of degree 5."""
    r = math.sqrt(15.0)
    a1, b1 = (6.0 - r) / 21.0, (9.0 + 2.0 * r) / 21.0
    a2, b2 = (6.0 + r) / 21.0, (9.0 - 2.0 * r) / 21.0
    w1, w2 = (155.0 - r) / 1200.0, (155.0 + r) / 1200.0
    bary = np.array(
        [
            [1 / 3, 1 / 3, 1 / 3],
            [a1, a1, b1], [a1, b1, a1], [b1, a1, a1],
            [a2, a2, b2], [a2, b2, a2], [b2, a2, a2],
        ]
    )
    weights = np.array([9.0 / 40.0, w1, w1, w1, w2, w2, w2])
    return TriangleRule(bary, weights, 5)


@lru_cache(maxsize=None)
def collapsed_gauss(m: int) -> TriangleRule:
    """Conical product rule with m x m points, exact to degree 2m - 1."""
    xj, wj = roots_jacobi(m, 1.0, 0.0)  # weight (1 - x) on [-1, 1]
    xl, wl = roots_legendre(m)
    u = 0.5 * (xj + 1.0)
    v = 0.5 * (xl + 1.0)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wj / 4.0, wl / 2.0)
    xi = U.ravel()
    eta = ((1.0 - U) * V).ravel()
    bary = np.column_stack([1.0 - xi - eta, xi, eta])
    w = W.ravel()
    return TriangleRule(bary, w / w.sum(), 2 * m - 1)


def assembly_rule() -> TriangleRule:
    return seven_point()


def norm_rule() -> TriangleRule:
    return collapsed_gauss(6)
