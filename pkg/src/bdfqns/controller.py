"""Adaptive variable-step, variable-order BDF driver.

The local error of a step of order q from t_n to t_{n+1} is estimated by

    EST = dt_n / (t_{n+1} - t_{n-q}) * || prod_{i<q} (t_{n+1} - t_{n-i}) u[t_{n+1}, ..., t_{n-q}] ||_M

and compared with TOL = TOL_r (max(|u^{n+1}|_M, |u^n|_M) + 0.001). Accepted steps
choose the next order among q-1, q, q+1 by the smallest estimate.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import fem
from .bdf import MAX_ORDER, divided_difference
from .cases import ManufacturedCase
from .restrictions import RestrictionConfig, check_restrictions
from .stepper import State, StepFailure, StepRecord, SolutionHistory, Stepper

log = logging.getLogger(__name__)

__all__ = [
    "ControllerError",
    "ControllerState",
    "StepLogRecord",
    "AdaptiveResult",
    "estimate_error",
    "tolerance",
    "new_step",
    "select_order",
    "adaptive_run",
    "write_step_log",
    "read_step_log",
    "check_restrictions",
    "RestrictionConfig",
]

SAFETY = 0.9
GROWTH_MAX = 2.0
SHRINK_MIN = 0.2
TOL_FLOOR = 0.001


class ControllerError(RuntimeError):
    """Raised for too many consecutive rejections or a collapsing step."""


@dataclass
class StepLogRecord:
    t: float  # time the step started from
    dt: float
    q: int
    est: float
    tol: float
    accepted: bool
    flags: tuple[str, ...] = ()


@dataclass
class ControllerState:
    q: int
    q_max: int
    tol_r: float
    dt: float
    accepted: int = 0
    rejected: int = 0
    log: list[StepLogRecord] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= self.q_max <= MAX_ORDER:
            raise ValueError(f"q_max must be in 1..{MAX_ORDER}, got {self.q_max}")
        if not 1 <= self.q <= self.q_max:
            raise ValueError(f"order {self.q} outside 1..{self.q_max}")
        if self.tol_r <= 0:
            raise ValueError("TOL_r must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def accepted_steps(self) -> list[StepLogRecord]:
        return [r for r in self.log if r.accepted]

    def average_dt(self) -> float:
        acc = self.accepted_steps()
        return float(np.mean([r.dt for r in acc])) if acc else math.nan


def estimate_error(times: Sequence[float], values: Sequence[np.ndarray], norm: Callable, q: Optional[int] = None) -> float:
    """EST for order q from states at ``times`` (most recent first, candidate included).

    Uses the q+2 most recent entries; ``q`` defaults to ``len(times) - 2``.
    """
    if q is None:
        q = len(times) - 2
    if q < 1:
        raise ValueError("order must be at least 1")
    if len(times) < q + 2 or len(values) < q + 2:
        raise ValueError(f"order {q} estimate needs {q + 2} states, got {min(len(times), len(values))}")
    t = np.asarray(times[: q + 2], dtype=float)
    dd = divided_difference(t, list(values[: q + 2]))
    scale = np.prod([t[0] - t[i + 1] for i in range(q)])
    return float((t[0] - t[1]) / (t[0] - t[q + 1]) * norm(scale * dd))


def tolerance(tol_r: float, u_curr: np.ndarray, u_prev: np.ndarray, norm: Callable) -> float:
    return tol_r * (max(norm(u_curr), norm(u_prev)) + TOL_FLOOR)


def new_step(dt: float, est: float, tol: float, q: int, max_dt: float = math.inf) -> float:
    """0.9 dt (TOL/EST)^(1/(q+1)), clamped to [dt/5, 2 dt] and to ``max_dt``."""
    if dt <= 0 or tol <= 0:
        raise ValueError("dt and TOL must be positive")
    if est == 0.0:
        factor = GROWTH_MAX
    else:
        factor = min(GROWTH_MAX, max(SHRINK_MIN, SAFETY * (tol / est) ** (1.0 / (q + 1))))
    return min(dt * factor, max_dt)


def select_order(estimates: dict[int, float], q: int, q_max: int) -> int:
    """Order with the smallest estimate among q-1, q, q+1 (ties keep q, then prefer lower)."""
    if q not in estimates:
        raise ValueError(f"estimate for the current order {q} is required")
    cands = [k for k in (q, q - 1, q + 1) if 1 <= k <= q_max and k in estimates]
    return min(cands, key=lambda k: (estimates[k], abs(k - q), k))


@dataclass
class AdaptiveResult:
    u: np.ndarray
    p: np.ndarray
    t: float
    state: ControllerState
    records: list[StepRecord]
    states: list[State] = field(default_factory=list)


def _estimates(history: SolutionHistory, cand: State, q: int, q_max: int, norm) -> dict[int, float]:
    times = [cand.t] + list(history.times())
    values = [cand.u] + [s.u for s in history]
    out = {}
    for k in (q - 1, q, q + 1):
        if 1 <= k <= q_max and len(times) >= k + 2:
            out[k] = estimate_error(times, values, norm, k)
    return out


def adaptive_run(
    stepper: Stepper,
    T: float,
    tol_r: float,
    q_max: int,
    case: Optional[ManufacturedCase] = None,
    t0: float = 0.0,
    u0: Optional[np.ndarray] = None,
    p0: Optional[np.ndarray] = None,
    restrictions: Optional[RestrictionConfig] = None,
    max_rejections: int = 10,
    track_errors: bool = True,
    keep_states: bool = False,
) -> AdaptiveResult:
    """Integrate from t0 to T with the variable-step, variable-order controller.

    Starts with order 1 and two equal steps of sqrt(TOL_r)/100; if the first
    estimate fails, both steps are redone from t0 with the reduced step.
    """
    if T <= t0:
        raise ValueError("T must exceed t0")
    if not 1 <= q_max <= MAX_ORDER:
        raise ValueError(f"q_max must be in 1..{MAX_ORDER}")
    space = stepper.space
    cfg = restrictions or RestrictionConfig()
    h = space.mesh.h_max
    norm = stepper.mass_norm
    if u0 is None:
        if case is None:
            u0 = np.zeros(space.n_u)
        else:
            u0 = fem.interpolate_velocity(space, case.u, t0)
    if p0 is None:
        p0 = fem.interpolate_pressure(space, case.p, t0) if case is not None else np.zeros(space.n_p)
    state = ControllerState(1, q_max, tol_r, math.sqrt(tol_r) / 100.0)
    start = State(t0, u0.copy(), p0.copy())
    history = SolutionHistory([start], capacity=q_max + 3)
    records: list[StepRecord] = []
    kept = [start] if keep_states else []
    errs = track_errors and case is not None
    consecutive = 0
    dt_min = 1e-14 * max(1.0, abs(T))
    restarts_open = True  # still inside the two-step start
    pending: Optional[StepLogRecord] = None

    while T - history[0].t > 1e-12 * max(1.0, abs(T)):
        q = state.q
        t_n = history[0].t
        flags: set[str] = set()
        rflags, max_dt = check_restrictions(state.dt, q, h, 2, cfg)
        if cfg.mode == "clamp" and state.dt > max_dt:
            state.dt = max_dt
            rflags, _ = check_restrictions(state.dt, q, h, 2, cfg)
        flags |= rflags
        dt = min(state.dt, T - t_n)
        if dt < dt_min:
            raise ControllerError(f"step size collapsed to {dt:.3e} at t={t_n:.6g}")
        try:
            r = stepper.variable_step(q, history, dt)
            cand = State(t_n + dt, r.u, r.p)
        except StepFailure as exc:
            log.warning("step failure at t=%g, dt=%g: %s", t_n, dt, exc)
            state.log.append(StepLogRecord(t_n, dt, q, math.inf, math.nan, False, tuple(sorted(flags | {"newton"}))))
            state.rejected += 1
            consecutive += 1
            if consecutive > max_rejections:
                raise ControllerError(f"{consecutive} consecutive rejections at t={t_n:.6g}") from exc
            state.dt = dt * SHRINK_MIN
            continue

        if len(history) < 2:
            # first of the two starting steps; it is judged together with the second
            history.push(cand)
            records.append(_record(stepper, case, cand, dt, q, r.newton_iterations, errs))
            if keep_states:
                kept.append(cand)
            pending = StepLogRecord(t_n, dt, q, math.nan, math.nan, False, tuple(sorted(flags | {"start"})))
            continue

        ests = _estimates(history, cand, q, q_max, norm)
        est = ests[q]
        tol = tolerance(tol_r, cand.u, history[0].u, norm)
        ok = est <= tol
        if pending is not None:
            pending.est, pending.tol, pending.accepted = est, tol, ok
            state.log.append(pending)
            if ok:
                state.accepted += 1
            else:
                state.rejected += 1
            pending = None
        state.log.append(StepLogRecord(t_n, dt, q, est, tol, ok, tuple(sorted(flags))))
        if not ok:
            state.rejected += 1
            consecutive += 1
            if consecutive > max_rejections:
                raise ControllerError(
                    f"more than {max_rejections} consecutive rejections at t={t_n:.6g} (EST={est:.3e}, TOL={tol:.3e})"
                )
            state.dt = new_step(dt, est, tol, q)
            if restarts_open:
                # redo both starting steps from t0 with the new step size
                while len(history) > 1:
                    history.pop()
                    records.pop()
                    if keep_states:
                        kept.pop()
                state.log[-1].flags = tuple(sorted(set(state.log[-1].flags) | {"restart"}))
            continue

        consecutive = 0
        restarts_open = False
        state.accepted += 1
        history.push(cand)
        if keep_states:
            kept.append(cand)
        records.append(_record(stepper, case, cand, dt, q, r.newton_iterations, errs))
        q_next = select_order(ests, q, q_max)
        state.q = q_next
        state.dt = new_step(dt, ests[q_next], tol, q_next)

    return AdaptiveResult(history[0].u, history[0].p, history[0].t, state, records, kept)


def _record(stepper: Stepper, case, s: State, dt: float, q: int, iters: int, errs: bool) -> StepRecord:
    rec = StepRecord(s.t, dt, q, iters, stepper.mass_norm(s.u))
    if errs:
        rec.l2_velocity, rec.h1_velocity, rec.l2_pressure = fem.error_norms(
            stepper.space, s.u, s.p, case.u, case.p, s.t, case.grad_u
        )
    return rec


LOG_HEADER = ["t", "dt", "q", "est", "tol", "accepted", "flags"]


def write_step_log(state: ControllerState, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in state.log:
            w.writerow([repr(r.t), repr(r.dt), r.q, repr(r.est), repr(r.tol), int(r.accepted), ";".join(r.flags)])


def read_step_log(path) -> list[StepLogRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                StepLogRecord(
                    float(row["t"]),
                    float(row["dt"]),
                    int(row["q"]),
                    float(row["est"]),
                    float(row["tol"]),
                    bool(int(row["accepted"])),
                    tuple(f for f in row["flags"].split(";") if f),
                )
            )
    return out
