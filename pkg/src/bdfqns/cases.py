"""Closed-form manufactured solutions on the unit square.

Each case carries velocity, pressure, forcing f = u_t - nu Lap u + (u.grad)u + grad p,
and the velocity gradient and time derivative needed for norms and the
Stokes projection. The forcing is written out by hand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ManufacturedCase:
    name: str
    nu: float
    u: Callable
    p: Callable
    f: Callable
    grad_u: Callable  # returns (2, 2, ...) indexed [component, derivative]
    u_t: Callable
    homogeneous_bc: bool = True
    nu_dependent: bool = True
    time_degree: int | None = None  # polynomial degree in t, when finite

    def convection(self, x, y, t):
        """(u . grad) u evaluated pointwise."""
        u = np.asarray(self.u(x, y, t))
        g = np.asarray(self.grad_u(x, y, t))
        return np.einsum("d...,cd...->c...", u, g)

    def stokes_rhs(self, x, y, t):
        """g = f - u_t - (u.grad)u, making (u, p) solve a steady Stokes problem."""
        return np.asarray(self.f(x, y, t)) - np.asarray(self.u_t(x, y, t)) - self.convection(x, y, t)

    def bc(self, x, y, t):
        return self.u(x, y, t)


# g(s) = s^2 (1 - s)^2 and its derivatives
def _g0(s):
    return s**2 * (1 - s) ** 2


def _g1(s):
    return 2 * s - 6 * s**2 + 4 * s**3


def _g2(s):
    return 2 - 12 * s + 12 * s**2


def _g3(s):
    return -12 + 24 * s


def stream2(nu: float = 1.0, amplitude: float = 1.0) -> ManufacturedCase:
    """u = curl(A sin t * g(x) g(y)), p = sin t (x - 1/2)(y - 1/2), A = ``amplitude``.

    A = 1 is the standard case; larger A makes convection significant.
    """
    a = float(amplitude)

    def u(x, y, t):
        s = a * np.sin(t)
        return np.array([s * _g0(x) * _g1(y), -s * _g1(x) * _g0(y)])

    def u_t(x, y, t):
        c = a * np.cos(t)
        return np.array([c * _g0(x) * _g1(y), -c * _g1(x) * _g0(y)])

    def grad_u(x, y, t):
        s = a * np.sin(t)
        return np.array(
            [
                [s * _g1(x) * _g1(y), s * _g0(x) * _g2(y)],
                [-s * _g2(x) * _g0(y), -s * _g1(x) * _g1(y)],
            ]
        )

    def p(x, y, t):
        return np.sin(t) * (x - 0.5) * (y - 0.5)

    def f(x, y, t):
        s0 = np.sin(t)
        s, c = a * s0, a * np.cos(t)
        gx, gy = _g0(x), _g0(y)
        g1x, g1y = _g1(x), _g1(y)
        g2x, g2y = _g2(x), _g2(y)
        lap1 = s * (g2x * g1y + gx * _g3(y))
        lap2 = -s * (_g3(x) * gy + g1x * g2y)
        conv1 = s * s * gx * g1x * (g1y**2 - gy * g2y)
        conv2 = s * s * gy * g1y * (g1x**2 - gx * g2x)
        f1 = c * gx * g1y - nu * lap1 + conv1 + s0 * (y - 0.5)
        f2 = -c * g1x * gy - nu * lap2 + conv2 + s0 * (x - 0.5)
        return np.array([f1, f2])

    return ManufacturedCase("stream2", nu, u, p, f, grad_u, u_t)


def polyq(degree: int = 2, nu: float = 1.0) -> ManufacturedCase:
    """u = t^q (x^2, -2xy), p = t^q (x + y - 1); exactly representable in P2/P1.

    The velocity does not vanish on the boundary; its trace is imposed as
    time-dependent Dirichlet data.
    """
    q = int(degree)

    def tau(t):
        return t**q

    def dtau(t):
        return q * t ** (q - 1) if q > 0 else 0.0 * t

    def u(x, y, t):
        return tau(t) * np.array([x**2 + 0 * y, -2 * x * y])

    def u_t(x, y, t):
        return dtau(t) * np.array([x**2 + 0 * y, -2 * x * y])

    def grad_u(x, y, t):
        z = 0 * x * y
        return tau(t) * np.array([[2 * x + z, z], [-2 * y + z, -2 * x + z]])

    def p(x, y, t):
        return tau(t) * (x + y - 1)

    def f(x, y, t):
        a, da = tau(t), dtau(t)
        z = 0 * x * y
        f1 = da * x**2 - nu * 2 * a + a * a * 2 * x**3 + a + z
        f2 = -da * 2 * x * y + a * a * 2 * x**2 * y + a + z
        return np.array([f1, f2])

    return ManufacturedCase("polyq", nu, u, p, f, grad_u, u_t, homogeneous_bc=False, time_degree=q)


def steady(nu: float = 1.0) -> ManufacturedCase:
    """Time-independent u = (x^2, -2xy), p = x + y - 1 (representable exactly)."""

    def u(x, y, t):
        return np.array([x**2 + 0 * y, -2 * x * y])

    def u_t(x, y, t):
        z = 0 * x * y
        return np.array([z, z])

    def grad_u(x, y, t):
        z = 0 * x * y
        return np.array([[2 * x + z, z], [-2 * y + z, -2 * x + z]])

    def p(x, y, t):
        return x + y - 1 + 0 * t

    def f(x, y, t):
        z = 0 * x * y
        return np.array([-2 * nu + 2 * x**3 + 1 + z, 2 * x**2 * y + 1 + z])

    return ManufacturedCase("steady", nu, u, p, f, grad_u, u_t, homogeneous_bc=False, time_degree=0)


def zero(nu: float = 1.0) -> ManufacturedCase:
    def vec(x, y, t):
        z = 0 * x * y
        return np.array([z, z])

    def grad(x, y, t):
        z = 0 * x * y
        return np.array([[z, z], [z, z]])

    def scal(x, y, t):
        return 0 * x * y

    return ManufacturedCase("zero", nu, vec, scal, vec, grad, vec, nu_dependent=False, time_degree=0)


_FACTORIES = {"stream2": stream2, "polyq": polyq, "steady": steady, "zero": zero}


def builtin_cases(nu: float = 1.0, degree: int = 2) -> list[ManufacturedCase]:
    return [stream2(nu), polyq(degree, nu), steady(nu)]


def get_case(name: str, nu: float = 1.0, degree: int = 2, amplitude: float = 1.0) -> ManufacturedCase:
    """Case by name; ``degree`` applies to "polyq", ``amplitude`` to "stream2"."""
    if name not in _FACTORIES:
        raise KeyError(f"unknown case {name!r}; choose from {sorted(_FACTORIES)}")
    if name == "polyq":
        return polyq(degree, nu)
    if name == "stream2":
        return stream2(nu, amplitude)
    return _FACTORIES[name](nu)
