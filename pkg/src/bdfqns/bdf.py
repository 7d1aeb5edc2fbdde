"""BDF-q coefficients, stability constants and divided differences.

All coefficients are produced as exact :class:`fractions.Fraction` values and
converted to floats once, when a :class:`BdfScheme` is built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Sequence

import numpy as np

MAX_ORDER = 5

# Hard-coded multipliers for the G-stability argument (no recomputation procedure exists).
_ETA = {1: 0.0, 2: 0.0, 3: 0.0769, 4: 0.2878, 5: 0.8097}

# Closed forms of sigma_q; q=5 is only known to six significant digits.
SIGMA_CLOSED_FORM = {
    3: 1.0 / 96.0,
    4: (260.0 + 43.0 * math.sqrt(43.0)) / 2916.0,
    5: 0.814454,
}
_SIGMA_CHECK_TOL = {3: 1e-9, 4: 1e-9, 5: 5e-7}


class InvalidOrderError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


class DegenerateNodesError(ValueError):
    pass


def _check_order(q: int, lo: int, hi: int) -> None:
    if not isinstance(q, (int, np.integer)) or not lo <= q <= hi:
        raise InvalidOrderError(f"order must be an integer in {lo}..{hi}, got {q!r}")


def _poly_mul(a: list[Fraction], b: list[Fraction]) -> list[Fraction]:
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


def bdf_coefficients(q: int) -> list[Fraction]:
    """Return delta_0..delta_q from the expansion of sum_{l=1}^q (1 - z)^l / l."""
    _check_order(q, 1, MAX_ORDER)
    total = [Fraction(0)] * (q + 1)
    power = [Fraction(1)]
    for l in range(1, q + 1):
        power = _poly_mul(power, [Fraction(1), Fraction(-1)])
        for i, c in enumerate(power):
            total[i] += c / l
    return total


def gamma_coefficients(q: int) -> list[Fraction]:
    """Coefficients of the BDF-q formula written in first differences.

    ``D y_n + sum_k gamma[k] D y_{n-k}`` equals ``sum_i delta_i y_{n-i}``.
    """
    _check_order(q, 3, MAX_ORDER)
    out = []
    for k in range(q):
        s = sum(
            (Fraction(comb(j - 1, k), j) for j in range(max(k + 1, 2), q + 1)),
            Fraction(0),
        )
        out.append(s if k % 2 == 0 else -s)
    return out


def _chebyshev_to_power(coeffs: Sequence[Fraction]) -> list[Fraction]:
    """Rewrite sum_k c_k cos(k theta) as a polynomial in x = cos(theta)."""
    t_prev, t_curr = [Fraction(1)], [Fraction(0), Fraction(1)]
    out = [Fraction(0)] * max(len(coeffs), 1)
    for k, c in enumerate(coeffs):
        if k == 0:
            tk = t_prev
        elif k == 1:
            tk = t_curr
        else:
            shifted = [Fraction(0)] + [2 * v for v in t_curr]
            padded = t_prev + [Fraction(0)] * (len(shifted) - len(t_prev))
            tk = [a - b for a, b in zip(shifted, padded)]
            t_prev, t_curr = t_curr, tk
        for i, v in enumerate(tk):
            out[i] += c * v
    return out


def _polyval(c: Sequence[float], x: float) -> float:
    acc = 0.0
    for v in reversed(c):
        acc = acc * x + v
    return acc


def _bisect(f, a: float, b: float, tol: float, max_iter: int = 200) -> float:
    fa = f(a)
    for _ in range(max_iter):
        m = 0.5 * (a + b)
        if b - a <= tol:
            return m
        fm = f(m)
        if fm == 0.0:
            return m
        if (fm < 0) == (fa < 0):
            a, fa = m, fm
        else:
            b = m
    raise NumericalFailure(f"bisection did not reach tolerance {tol} on [{a}, {b}]")


def sigma_min(q: int, tol: float = 1e-13, grid: int = 2001) -> float:
    """Return -min over theta of gamma_0 + sum_k gamma_k cos(k theta).

    Minimises the equivalent polynomial in x = cos(theta) on [-1, 1] through the
    real roots of its derivative, found by bisection on sign-change brackets.
    """
    _check_order(q, 3, MAX_ORDER)
    if tol <= 0:
        raise ValueError("tol must be positive")
    power = [float(c) for c in _chebyshev_to_power(gamma_coefficients(q))]
    deriv = [i * c for i, c in enumerate(power)][1:]
    xs = np.linspace(-1.0, 1.0, grid)
    dv = np.array([_polyval(deriv, x) for x in xs])
    candidates = [-1.0, 1.0]
    for i in range(grid - 1):
        if dv[i] == 0.0:
            candidates.append(float(xs[i]))
        elif dv[i] * dv[i + 1] < 0:
            root = _bisect(lambda x: _polyval(deriv, x), float(xs[i]), float(xs[i + 1]), tol)
            candidates.append(root)
    values = [_polyval(power, x) for x in candidates]
    # value error is bounded by |p'| * tol, and p' ~ 0 at an interior root
    return -min(values)


def multiplier_eta(q: int) -> float:
    _check_order(q, 1, MAX_ORDER)
    return _ETA[q]


def divided_difference(times: Sequence[float], values) -> np.ndarray:
    """Newton divided difference v[t_0, ..., t_m] applied componentwise.

    ``values`` is a sequence of m+1 equally shaped arrays (or scalars).
    Node order does not matter for the result.
    """
    t = np.asarray(times, dtype=float)
    if len(t) != len(values):
        raise ValueError("times and values must have the same length")
    table = [np.asarray(v, dtype=float).copy() for v in values]
    m = len(t) - 1
    for level in range(1, m + 1):
        for i in range(m - level + 1):
            span = t[i + level] - t[i]
            if span == 0.0:
                raise DegenerateNodesError(f"repeated node t={t[i]}")
            table[i] = (table[i + 1] - table[i]) / span
    return table[0]


def variable_bdf_weights(times: Sequence[float]) -> np.ndarray:
    """Weights w with sum_j w_j y(times[j]) = P'(times[0]).

    P interpolates y at all nodes, ``times[0]`` is the new time level. For
    uniform spacing dt this reproduces ``delta / dt``.
    """
    t = np.asarray(times, dtype=float)
    n = len(t)
    if len(np.unique(t)) != n:
        raise DegenerateNodesError("repeated time nodes")
    w = np.empty(n)
    t0 = t[0]
    # l_0'(t0) = sum_{m != 0} 1/(t0 - t_m); l_j'(t0) = prod_{m != 0, j}(t0 - t_m) / prod_{m != j}(t_j - t_m)
    w[0] = sum(1.0 / (t0 - t[m]) for m in range(1, n))
    for j in range(1, n):
        num = np.prod([t0 - t[m] for m in range(1, n) if m != j])
        den = np.prod([t[j] - t[m] for m in range(n) if m != j])
        w[j] = num / den
    return w


def extrapolation_weights(times: Sequence[float], target: float) -> np.ndarray:
    """Lagrange weights evaluating the interpolant through ``times`` at ``target``."""
    t = np.asarray(times, dtype=float)
    w = np.ones(len(t))
    for j in range(len(t)):
        for m in range(len(t)):
            if m != j:
                w[j] *= (target - t[m]) / (t[j] - t[m])
    return w


@dataclass(frozen=True)
class BdfScheme:
    q: int
    delta_exact: tuple[Fraction, ...] = field(repr=False)
    gamma_exact: tuple[Fraction, ...] = field(repr=False)
    delta: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)
    eta: float
    sigma: float | None
    s: float | None

    @classmethod
    def build(cls, q: int) -> "BdfScheme":
        _check_order(q, 1, MAX_ORDER)
        delta = tuple(bdf_coefficients(q))
        gamma = tuple(gamma_coefficients(q)) if q >= 3 else ()
        sigma = s = None
        if q >= 3:
            sigma = sigma_min(q)
            if abs(sigma - SIGMA_CLOSED_FORM[q]) > _SIGMA_CHECK_TOL[q]:
                raise NumericalFailure(
                    f"sigma_{q}={sigma!r} disagrees with closed form {SIGMA_CLOSED_FORM[q]!r}"
                )
            s = 1.0 - sigma
        d = np.array([float(c) for c in delta])
        g = np.array([float(c) for c in gamma])
        d.setflags(write=False)
        g.setflags(write=False)
        return cls(q, delta, gamma, d, g, multiplier_eta(q), sigma, s)


_CACHE: dict[int, BdfScheme] = {}


def scheme(q: int) -> BdfScheme:
    """Cached immutable :class:`BdfScheme` of order q."""
    if q not in _CACHE:
        _CACHE[q] = BdfScheme.build(q)
    return _CACHE[q]
