import math
from fractions import Fraction

import numpy as np
import pytest
import sympy

from bdfqns.bdf import (
    DegenerateNodesError,
    InvalidOrderError,
    NumericalFailure,
    bdf_coefficients,
    divided_difference,
    extrapolation_weights,
    gamma_coefficients,
    multiplier_eta,
    scheme,
    sigma_min,
    variable_bdf_weights,
)


def sympy_delta(q):
    z = sympy.symbols("z")
    poly = sympy.expand(sum((1 - z) ** l / sympy.Integer(l) for l in range(1, q + 1)))
    return [Fraction(str(sympy.Rational(poly.coeff(z, i)))) for i in range(q + 1)]


def sympy_gamma(q):
    out = []
    for k in range(q):
        s = sum(sympy.Rational(sympy.binomial(j - 1, k), j) for j in range(max(k + 1, 2), q + 1))
        out.append(Fraction(str((-1) ** k * s)))
    return out


@pytest.mark.parametrize("q", range(1, 6))
def test_delta_matches_symbolic_expansion(q):
    assert bdf_coefficients(q) == sympy_delta(q)


def test_delta_known_values():
    assert bdf_coefficients(1) == [1, -1]
    assert bdf_coefficients(2) == [Fraction(3, 2), -2, Fraction(1, 2)]
    assert bdf_coefficients(5)[0] == Fraction(137, 60)


@pytest.mark.parametrize("q", range(1, 6))
def test_delta_sums_to_zero_and_is_consistent(q):
    d = bdf_coefficients(q)
    assert sum(d) == 0
    # differentiates linear functions exactly: sum_i delta_i * (-i) = 1
    assert sum(-i * c for i, c in enumerate(d)) == 1


def test_gamma_table_values():
    F = Fraction
    assert gamma_coefficients(3) == [F(5, 6), F(-7, 6), F(1, 3)]
    assert gamma_coefficients(4) == [F(13, 12), F(-23, 12), F(13, 12), F(-1, 4)]
    assert gamma_coefficients(5) == [F(77, 60), F(-163, 60), F(137, 60), F(-63, 60), F(1, 5)]


@pytest.mark.parametrize("q", [3, 4, 5])
def test_gamma_matches_symbolic_sum(q):
    assert gamma_coefficients(q) == sympy_gamma(q)


@pytest.mark.parametrize("q", [0, 6, -1])
def test_invalid_order(q):
    with pytest.raises(InvalidOrderError):
        bdf_coefficients(q)


@pytest.mark.parametrize("q", [1, 2, 6])
def test_gamma_invalid_order(q):
    with pytest.raises(InvalidOrderError):
        gamma_coefficients(q)


def test_sigma_closed_forms():
    assert abs(sigma_min(3) - 1 / 96) <= 1e-9
    assert abs(sigma_min(4) - (260 + 43 * math.sqrt(43)) / 2916) <= 1e-9
    assert abs(sigma_min(5) - 0.814454) <= 5e-7


@pytest.mark.parametrize("q", [3, 4, 5])
def test_sigma_against_dense_sampling(q):
    g = [float(c) for c in gamma_coefficients(q)]
    th = np.linspace(-np.pi, np.pi, 200001)
    vals = sum(gk * np.cos(k * th) for k, gk in enumerate(g))
    assert abs(sigma_min(q) - (-vals.min())) < 1e-8


def test_sigma_below_known_bounds():
    assert sigma_min(4) < 3 / 16
    assert sigma_min(5) < 9 / 11


def test_eta_values():
    assert [multiplier_eta(q) for q in range(1, 6)] == [0, 0, 0.0769, 0.2878, 0.8097]


def test_scheme_cached_and_immutable():
    s = scheme(4)
    assert s is scheme(4)
    assert s.s == pytest.approx(1 - s.sigma)
    with pytest.raises(ValueError):
        s.delta[0] = 1.0
    assert scheme(2).gamma.size == 0 and scheme(2).sigma is None


def test_divided_difference_polynomial():
    t = [0.3, 0.1, -0.2, 0.7]
    cubic = [2 * x**3 - x + 1 for x in t]
    assert divided_difference(t, cubic) == pytest.approx(2.0)
    assert abs(divided_difference(t + [1.1], cubic + [2 * 1.1**3 - 1.1 + 1])) < 1e-12


def test_divided_difference_vector_and_permutation():
    t = [0.0, 0.5, 0.2]
    v = [np.array([x**2, 3 * x]) for x in t]
    a = divided_difference(t, v)
    b = divided_difference(t[::-1], v[::-1])
    assert np.allclose(a, [1.0, 0.0]) and np.allclose(a, b)


def test_divided_difference_repeated_nodes():
    with pytest.raises(DegenerateNodesError):
        divided_difference([0.0, 0.0], [1.0, 2.0])


@pytest.mark.parametrize("q", range(1, 6))
def test_variable_weights_reduce_to_uniform(q):
    dt = 0.01
    times = [-i * dt for i in range(q + 1)]
    w = variable_bdf_weights(times)
    assert np.allclose(w * dt, scheme(q).delta, rtol=1e-12, atol=1e-12)


def test_variable_weights_exact_on_polynomials():
    times = [1.0, 0.9, 0.75, 0.7]
    w = variable_bdf_weights(times)
    y = [t**3 - 2 * t for t in times]
    assert np.dot(w, y) == pytest.approx(3 * 1.0**2 - 2, rel=1e-12)


def test_extrapolation_weights_exact():
    times = [0.5, 0.4, 0.2]
    w = extrapolation_weights(times, 0.7)
    assert np.dot(w, [t**2 for t in times]) == pytest.approx(0.49)
    assert w.sum() == pytest.approx(1.0)


def test_numerical_failure_is_runtime_error():
    assert issubclass(NumericalFailure, RuntimeError)
