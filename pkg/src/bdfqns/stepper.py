"""Fully implicit BDF-q steps for the Navier-Stokes system, solved by Newton.

Each step solves, for all discrete test functions (v, r),

    (D_t u, v) + nu (grad u, grad v) + b(u, u, v) - (p, div v)
        + (div u, r) + mu (div u, div v) = (f(t_n), v)

with D_t the BDF difference quotient, Dirichlet data imposed strongly at
t_n and the pressure mean fixed to zero by a Lagrange multiplier.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import fem
from .bdf import BdfScheme, extrapolation_weights, variable_bdf_weights
from .cases import ManufacturedCase
from .linsolve import BlockSystem
from .restrictions import RestrictionConfig, check_restrictions

log = logging.getLogger(__name__)

LINEAR_RTOL = 1e-10


class StepFailure(RuntimeError):
    def __init__(self, message: str, t: float | None = None):
        super().__init__(message if t is None else f"{message} (t={t:.6g})")
        self.t = t


class ConfigurationError(ValueError):
    pass


def _zero_field(x, y, t):
    z = 0.0 * x * y
    return np.array([z, z])


@dataclass(frozen=True)
class StepConfig:
    nu: float = 1.0
    mu: float = 0.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 25
    bc: Callable = _zero_field
    f: Callable = _zero_field
    max_halvings: int = 8

    def __post_init__(self):
        if self.nu <= 0:
            raise ConfigurationError("nu must be positive")
        if self.mu < 0:
            raise ConfigurationError("mu must be non-negative")
        if self.newton_tol <= 0:
            raise ConfigurationError("newton_tol must be positive")

    @classmethod
    def for_case(cls, case: ManufacturedCase, mu: float = 0.0, **kw) -> "StepConfig":
        return cls(nu=case.nu, mu=mu, bc=case.bc, f=case.f, **kw)


@dataclass
class State:
    t: float
    u: np.ndarray
    p: np.ndarray


class SolutionHistory:
    """Most-recent-first buffer of accepted states."""

    def __init__(self, states=(), capacity: int = 8):
        self._buf: deque[State] = deque(maxlen=capacity)
        for s in states:
            self.push(s)

    def push(self, state: State) -> None:
        if self._buf and state.t <= self._buf[0].t:
            raise ValueError(f"time {state.t} does not advance past {self._buf[0].t}")
        self._buf.appendleft(state)

    def pop(self) -> State:
        return self._buf.popleft()

    def __len__(self) -> int:
        return len(self._buf)

    def __getitem__(self, i: int) -> State:
        return self._buf[i]

    def __iter__(self):
        return iter(self._buf)

    @property
    def capacity(self) -> int:
        return self._buf.maxlen

    def latest(self, k: int) -> list[State]:
        return list(self._buf)[:k]

    def times(self) -> np.ndarray:
        return np.array([s.t for s in self._buf])

    def uniform_step(self, k: int | None = None, rtol: float = 1e-9) -> float | None:
        """Common spacing of the k most recent states, or None if not uniform."""
        t = self.times()[: (k or len(self))]
        if len(t) < 2:
            return None
        d = -np.diff(t)
        return float(d[0]) if np.allclose(d, d[0], rtol=rtol, atol=0.0) else None

    def copy(self) -> "SolutionHistory":
        h = SolutionHistory(capacity=self.capacity)
        h._buf = deque(self._buf, maxlen=self.capacity)
        return h


@dataclass
class StepResult:
    u: np.ndarray
    p: np.ndarray
    newton_iterations: int
    residuals: list[float] = field(default_factory=list)


class Stepper:
    """Owns the discrete operators for one space and configuration."""

    def __init__(self, space: fem.MixedSpace, config: StepConfig):
        self.space = space
        self.config = config
        self.ops = fem.assemble_linear_operators(space, config.nu, max(config.mu, 0.0))
        self.system = BlockSystem(self.ops.Bdiv, self.ops.mean, space.free_dofs)
        self._base = (self.ops.A + self.ops.Gd).tocsr()
        self.linear_residuals: list[float] = []

    # -------------------------------------------------------------- helpers

    def mass_norm(self, u: np.ndarray) -> float:
        return fem.mass_norm(self.ops.M, u)

    def dirichlet_values(self, t: float) -> np.ndarray:
        return fem.interpolate_velocity(self.space, self.config.bc, t)[self.space.dirichlet_dofs]

    def load(self, t: float) -> np.ndarray:
        return fem.assemble_load(self.space, self.config.f, t)

    def _residual(self, u, p, lam, a0, known):
        ops = self.ops
        conv = fem.assemble_convection(self.space, u)
        ru = a0 * (ops.M @ u) + self._base @ u + conv @ u - ops.Bdiv.T @ p - known
        rp = -(ops.Bdiv @ u) + ops.mean * lam
        rl = ops.mean @ p
        return np.concatenate([ru[self.space.free_dofs], rp, [rl]])

    # -------------------------------------------------------------- solves

    def solve_implicit(
        self,
        t: float,
        a0: float,
        history_term: np.ndarray,
        guess_u: np.ndarray,
        guess_p: np.ndarray,
    ) -> StepResult:
        """Newton solve with time derivative approximated by ``a0 u + history_term``."""
        cfg = self.config
        free, D = self.space.free_dofs, self.space.dirichlet_dofs
        u = guess_u.copy()
        u[D] = self.dirichlet_values(t)
        p = guess_p.copy()
        lam = 0.0
        known = self.load(t) - self.ops.M @ history_term
        scale = 1.0 + np.linalg.norm(known[free])
        K_lin = (a0 * self.ops.M + self._base).tocsr()
        res = self._residual(u, p, lam, a0, known)
        rnorm = np.linalg.norm(res)
        residuals = [rnorm]
        it = 0
        while rnorm > cfg.newton_tol * scale:
            if it >= cfg.newton_max_iter:
                raise StepFailure(
                    f"Newton did not converge in {cfg.newton_max_iter} iterations (residual {rnorm:.3e})", t
                )
            J = K_lin + fem.assemble_convection_jacobian(self.space, u)
            fac = self.system.factorize(J)
            delta = fac.solve(-res, rtol=LINEAR_RTOL)
            self.linear_residuals.append(fac.residual(delta, -res))
            du, dp, dl = self.system.split(delta)
            alpha = 1.0
            for _ in range(cfg.max_halvings + 1):
                u_try = u.copy()
                u_try[free] += alpha * du
                p_try = p + alpha * dp
                l_try = lam + alpha * dl
                res_try = self._residual(u_try, p_try, l_try, a0, known)
                r_try = np.linalg.norm(res_try)
                if r_try < rnorm or alpha < 2.0**-cfg.max_halvings:
                    break
                alpha *= 0.5
            if alpha < 1.0:
                log.debug("damped Newton step alpha=%g at t=%g", alpha, t)
            u, p, lam, res, rnorm = u_try, p_try, l_try, res_try, r_try
            residuals.append(rnorm)
            it += 1
            if not np.isfinite(rnorm):
                raise StepFailure("Newton iteration diverged", t)
        return StepResult(u, p, it, residuals)

    def predictor(self, history: SolutionHistory, t: float, order: int) -> tuple[np.ndarray, np.ndarray]:
        states = history.latest(min(order + 1, len(history)))
        w = extrapolation_weights([s.t for s in states], t)
        u = sum(wi * s.u for wi, s in zip(w, states))
        p = sum(wi * s.p for wi, s in zip(w, states))
        return u, p

    def step(self, scheme: BdfScheme, history: SolutionHistory, dt: float) -> StepResult:
        """One uniform BDF-q step from the q most recent states (spacing dt)."""
        q = scheme.q
        if dt <= 0:
            raise ValueError("dt must be positive")
        if len(history) < q:
            raise ValueError(f"BDF-{q} needs {q} previous states, history has {len(history)}")
        states = history.latest(q)
        if q > 1:
            spacing = -np.diff([s.t for s in states])
            if not np.allclose(spacing, dt, rtol=1e-9, atol=0.0):
                raise ValueError("history spacing differs from dt; use variable_step")
        t = states[0].t + dt
        hist = sum(scheme.delta[i + 1] * s.u for i, s in enumerate(states)) / dt
        gu, gp = self.predictor(history, t, q)
        return self.solve_implicit(t, scheme.delta[0] / dt, hist, gu, gp)

    def variable_step(self, order: int, history: SolutionHistory, dt: float) -> StepResult:
        """Variable-coefficient BDF step of the given order to t = t_latest + dt."""
        if len(history) < order:
            raise ValueError(f"order {order} needs {order} previous states")
        states = history.latest(order)
        t = states[0].t + dt
        w = variable_bdf_weights([t] + [s.t for s in states])
        hist = sum(wi * s.u for wi, s in zip(w[1:], states))
        gu, gp = self.predictor(history, t, order)
        return self.solve_implicit(t, w[0], hist, gu, gp)


def bdf_step(stepper: Stepper, scheme: BdfScheme, history: SolutionHistory, dt: float):
    """(u_new, p_new, newton_iterations) of one uniform BDF-q step."""
    r = stepper.step(scheme, history, dt)
    return r.u, r.p, r.newton_iterations


# ------------------------------------------------------------------ startup


def initialize_history(
    mode: str,
    scheme: BdfScheme,
    stepper: Stepper,
    dt: float,
    case: Optional[ManufacturedCase] = None,
    t0: float = 0.0,
    u0: Optional[np.ndarray] = None,
    capacity: Optional[int] = None,
) -> SolutionHistory:
    """States at t0, t0 + dt, ..., t0 + (q-1) dt.

    ``exact`` interpolates the manufactured solution at every level. ``ramp``
    starts from the initial velocity alone: BDF-1 with step dt / 2^q, then the
    order and step are doubled per stage (order capped at q) until t0 + dt, and
    further steps of size dt fill the remaining levels.
    """
    q = scheme.q
    space = stepper.space
    cap = capacity or q + 3
    if mode == "exact":
        if case is None:
            raise ConfigurationError("start mode 'exact' requires a manufactured case")
        states = []
        for i in range(q):
            t = t0 + i * dt
            states.append(
                State(t, fem.interpolate_velocity(space, case.u, t), fem.interpolate_pressure(space, case.p, t))
            )
        return SolutionHistory(states, capacity=cap)
    if mode != "ramp":
        raise ConfigurationError(f"unknown start mode {mode!r}")
    if u0 is None:
        if case is None:
            raise ConfigurationError("start mode 'ramp' needs u0 or a case")
        u0 = fem.interpolate_velocity(space, case.u, t0)
    p0 = fem.interpolate_pressure(space, case.p, t0) if case is not None else np.zeros(space.n_p)
    grid = SolutionHistory([State(t0, u0.copy(), p0)], capacity=cap)
    if q == 1:
        return grid
    work = SolutionHistory([State(t0, u0.copy(), p0)], capacity=q + 2)
    h0 = dt / 2**q
    steps = [h0] + [h0 * 2**j for j in range(q)]  # sums to dt
    for stage, h in enumerate(steps):
        order = min(stage + 1, q, len(work))
        r = stepper.variable_step(order, work, h)
        work.push(State(work[0].t + h, r.u, r.p))
    grid.push(State(t0 + dt, work[0].u, work[0].p))
    for i in range(2, q):
        order = min(q, len(work))
        r = stepper.variable_step(order, work, dt)
        work.push(State(t0 + i * dt, r.u, r.p))
        grid.push(work[0])
    return grid


# ------------------------------------------------------------------ runs


@dataclass
class StepRecord:
    t: float
    dt: float
    q: int
    newton_iters: int
    u_norm: float
    l2_velocity: float = math.nan
    h1_velocity: float = math.nan
    l2_pressure: float = math.nan


@dataclass
class RunResult:
    u: np.ndarray
    p: np.ndarray
    t: float
    records: list[StepRecord]
    states: dict[int, State] = field(default_factory=dict)
    pressure_l2l2: float = math.nan  # (dt sum_{n>=q} |p(t_n) - p_h^n|^2)^(1/2)
    gradient_l2l2: float = math.nan  # (dt sum_{n>=q} |grad e^n|^2)^(1/2), no nu weight
    newton_residual_logs: list[list[float]] = field(default_factory=list)
    restriction_flags: set = field(default_factory=set)


def _steps_in(T: float, dt: float, t0: float = 0.0) -> int:
    m = (T - t0) / dt
    M = int(round(m))
    if abs(m - M) > 1e-8 * max(1.0, abs(m)):
        raise ConfigurationError(f"(T - t0) / dt = {m} is not an integer")
    return M


def fixed_step_run(
    scheme: BdfScheme,
    stepper: Stepper,
    T: float,
    dt: float,
    start_mode: str = "exact",
    case: Optional[ManufacturedCase] = None,
    t0: float = 0.0,
    history: Optional[SolutionHistory] = None,
    store_every: int = 0,
    track_errors: bool = True,
    restrictions: Optional[RestrictionConfig] = None,
) -> RunResult:
    """Advance with uniform BDF-q steps from t_{q-1} to T.

    ``history`` overrides ``start_mode`` with user supplied starting states.
    With ``store_every = k > 0`` every k-th time level (index n, t_n = t0 + n dt)
    is kept in ``RunResult.states``.
    """
    q = scheme.q
    M = _steps_in(T, dt, t0)
    if M < q - 1:
        raise ConfigurationError(f"T too short for BDF-{q} start with dt={dt}")
    flags, _ = check_restrictions(dt, q, stepper.space.mesh.h_max, 2, restrictions)
    if flags and (restrictions is None or restrictions.mode != "off"):
        log.warning("dt=%g violates step restrictions %s for q=%d", dt, sorted(flags), q)
    if history is None:
        history = initialize_history(start_mode, scheme, stepper, dt, case, t0)
    else:
        history = history.copy()
    states: dict[int, State] = {}
    if store_every:
        for s in history:
            n = int(round((s.t - t0) / dt))
            if n % store_every == 0:
                states[n] = s
    records: list[StepRecord] = []
    logs = []
    p_sum = g_sum = 0.0
    errs = track_errors and case is not None
    n_start = int(round((history[0].t - t0) / dt))
    for n in range(n_start + 1, M + 1):
        try:
            r = stepper.step(scheme, history, dt)
        except StepFailure as exc:
            raise StepFailure(f"run aborted at time level {n}: {exc}", t0 + n * dt) from exc
        t = t0 + n * dt
        history.push(State(t, r.u, r.p))
        logs.append(r.residuals)
        rec = StepRecord(t, dt, q, r.newton_iterations, stepper.mass_norm(r.u))
        if errs:
            rec.l2_velocity, rec.h1_velocity, rec.l2_pressure = fem.error_norms(
                stepper.space, r.u, r.p, case.u, case.p, t, case.grad_u
            )
            p_sum += dt * rec.l2_pressure**2
            g_sum += dt * rec.h1_velocity**2
        records.append(rec)
        if store_every and n % store_every == 0:
            states[n] = history[0]
    out = RunResult(history[0].u, history[0].p, history[0].t, records, states, newton_residual_logs=logs)
    out.restriction_flags = flags
    if errs:
        out.pressure_l2l2 = math.sqrt(p_sum)
        out.gradient_l2l2 = math.sqrt(g_sum)
    return out
