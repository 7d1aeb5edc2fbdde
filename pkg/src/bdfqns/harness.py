"""Verification experiments: temporal and spatial convergence, nu-robustness,
Stokes projection and the tables they produce."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import fem
from .bdf import scheme as bdf_scheme
from .cases import ManufacturedCase, builtin_cases, get_case
from .linsolve import BlockSystem
from .mesh import Mesh, unit_square_mesh
from .restrictions import RestrictionConfig
from .stepper import (
    SolutionHistory,
    StepConfig,
    StepFailure,
    Stepper,
    fixed_step_run,
)

__all__ = [
    "ConvergenceTable",
    "RobustnessTable",
    "builtin_cases",
    "observed_orders",
    "temporal_convergence",
    "spatial_convergence",
    "robustness_sweep",
    "stokes_projection",
    "export_table",
    "read_table",
    "report",
    "sweep_threads",
]

QUIET = RestrictionConfig(mode="off")


def sweep_threads() -> int:
    """Parallelism cap for sweeps, from BDFQNS_THREADS (default 1)."""
    raw = os.environ.get("BDFQNS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"BDFQNS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"BDFQNS_THREADS must be a positive integer, got {raw!r}")
    return n


def _map(fn: Callable, items: Sequence, threads: Optional[int] = None) -> list:
    threads = threads or sweep_threads()
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def observed_orders(res: Sequence[float], errors: Sequence[float]) -> list[float]:
    """log(e_c / e_f) / log(r_c / r_f) between consecutive rows; nan for the first."""
    out = [math.nan]
    for i in range(1, len(errors)):
        ec, ef, rc, rf = errors[i - 1], errors[i], res[i - 1], res[i]
        if ec > 0 and ef > 0 and rc != rf and np.isfinite(ec) and np.isfinite(ef):
            out.append(math.log(ec / ef) / math.log(rc / rf))
        else:
            out.append(math.nan)
    return out


@dataclass
class ConvergenceTable:
    """Errors against a resolution parameter (dt or h) with observed orders."""

    parameter: str
    values: list[float] = field(default_factory=list)
    errors: dict[str, list[float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def add_row(self, value: float, note: str = "", **errs: float) -> None:
        if self.values and set(errs) != set(self.errors):
            raise ValueError(f"row norms {sorted(errs)} differ from table norms {sorted(self.errors)}")
        self.values.append(float(value))
        for k, v in errs.items():
            self.errors.setdefault(k, []).append(float(v))
        self.notes.append(note)

    @property
    def norms(self) -> list[str]:
        return list(self.errors)

    def orders(self, norm: str) -> list[float]:
        return observed_orders(self.values, self.errors[norm])

    def __len__(self) -> int:
        return len(self.values)

    def format(self) -> str:
        head = [self.parameter] + [f"{n} (order)" for n in self.norms]
        lines = ["  ".join(f"{h:>24}" for h in head)]
        for i, v in enumerate(self.values):
            cells = [f"{v:>24.6g}"]
            for n in self.norms:
                o = self.orders(n)[i]
                o_s = "" if math.isnan(o) else f" ({o:.2f})"
                cells.append(f"{self.errors[n][i]:.4e}{o_s}".rjust(24))
            line = "  ".join(cells)
            if self.notes[i]:
                line += f"  # {self.notes[i]}"
            lines.append(line)
        return "\n".join(lines)


def _fmt(x: float) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def export_table(table: ConvergenceTable, path) -> None:
    """CSV: parameter column, then each norm followed by its observed-order column."""
    header = [table.parameter]
    for n in table.norms:
        header += [n, f"{n}_order"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, v in enumerate(table.values):
            row = [repr(v)]
            for n in table.norms:
                row += [repr(table.errors[n][i]), _fmt(table.orders(n)[i])]
            w.writerow(row)


def read_table(path) -> tuple[ConvergenceTable, dict[str, list[float]]]:
    """Read an exported table; also returns the stored order columns."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    norms = [h for h in header[1::2]]
    table = ConvergenceTable(header[0], errors={n: [] for n in norms})
    stored: dict[str, list[float]] = {n: [] for n in norms}
    for row in rows[1:]:
        table.values.append(float(row[0]))
        table.notes.append("")
        for j, n in enumerate(norms):
            table.errors[n].append(float(row[1 + 2 * j]))
            o = row[2 + 2 * j]
            stored[n].append(float(o) if o else math.nan)
    return table, stored


# ---------------------------------------------------------------- Stokes


def stokes_projection(
    space: fem.MixedSpace,
    nu: float,
    g: Callable,
    t: float = 0.0,
    bc: Optional[Callable] = None,
    mu: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Discrete Stokes solve nu (grad s, grad w) - (div w, r) = (g, w), (div s, q) = 0.

    ``g(x, y, t)`` is a vector field; ``bc`` gives Dirichlet data (default zero).
    The pressure has zero mean.
    """
    ops = fem.assemble_linear_operators(space, nu, mu)
    system = BlockSystem(ops.Bdiv, ops.mean, space.free_dofs)
    K = (ops.A + ops.Gd).tocsr()
    free, D = space.free_dofs, space.dirichlet_dofs
    u_d = np.zeros(space.n_u)
    if bc is not None:
        u_d[D] = fem.interpolate_velocity(space, bc, t)[D]
    load = fem.assemble_load(space, g, t)
    rhs = np.concatenate([(load - K @ u_d)[free], ops.Bdiv @ u_d, [0.0]])
    if not np.any(rhs):
        return np.zeros(space.n_u), np.zeros(space.n_p)
    x = system.factorize(K).solve(rhs, rtol=1e-10)
    uf, p, _ = system.split(x)
    s = u_d.copy()
    s[free] = uf
    return s, p


def gradient_norm(ops: fem.AssembledOperators, nu: float, v: np.ndarray) -> float:
    """|grad v|_{L2} from the nu-scaled stiffness matrix."""
    return float(np.sqrt(max(v @ (ops.A @ v), 0.0) / nu))


# ---------------------------------------------------------------- temporal


def temporal_convergence(
    case: ManufacturedCase,
    q: int,
    dt_list: Sequence[float],
    space: fem.MixedSpace,
    mu: float = 0.0,
    T: float = 1.0,
    reference: bool = True,
    ref_factor: int = 8,
    start: str = "exact",
    newton_tol: float = 1e-12,
    threads: Optional[int] = None,
    ref_lead: float = 0.5,
) -> ConvergenceTable:
    """Final-time L2 velocity error and l2(0,T; H1) gradient errors against dt.

    In reference mode errors are measured against a run on the same mesh with
    dt_min / ref_factor, which removes the spatial error. ``start="reference"``
    seeds each coarse run with reference states instead of interpolants; the
    reference then starts ``ref_lead`` before t = 0 so that the transients of its
    own start have decayed by the time the seed states are taken.
    Gradient columns sum over time levels n >= q, with (``grad_nu``) and
    without (``grad``) the nu weight.
    """
    if start not in ("exact", "reference"):
        raise ValueError(f"start must be 'exact' or 'reference', got {start!r}")
    if start == "reference" and not reference:
        raise ValueError("start='reference' requires reference mode")
    if ref_lead < 0:
        raise ValueError("ref_lead must be non-negative")
    sch = bdf_scheme(q)
    dts = sorted((float(d) for d in dt_list), reverse=True)
    stepper = Stepper(space, StepConfig.for_case(case, mu=mu, newton_tol=newton_tol))
    ops = stepper.ops
    nu = case.nu
    table = ConvergenceTable(
        "dt", meta=dict(kind="temporal", case=case.name, q=q, nu=nu, mu=mu, T=T, reference=reference, start=start)
    )
    ref = None
    off = 0
    dt_ref = dts[-1] / ref_factor
    if reference:
        lead = ref_lead if start == "reference" else 0.0
        off = int(round(lead / dt_ref))
        ref = fixed_step_run(
            sch, stepper, T, dt_ref, "exact", case, t0=-off * dt_ref, store_every=1, track_errors=False,
            restrictions=QUIET,
        )

    def one(dt: float):
        try:
            hist = None
            if ref is not None:
                k = int(round(dt / dt_ref))
                if abs(k * dt_ref - dt) > 1e-9 * dt:
                    raise ValueError(f"dt={dt} is not a multiple of the reference step {dt_ref}")
                if start == "reference":
                    hist = SolutionHistory([ref.states[off + i * k] for i in range(q)], capacity=q + 3)
            run = fixed_step_run(
                sch, stepper, T, dt, "exact", case, history=hist, store_every=1 if ref is not None else 0,
                track_errors=ref is None, restrictions=QUIET,
            )
        except StepFailure as exc:
            nan = math.nan
            return dict(l2_velocity=nan, grad=nan, grad_nu=nan, pressure=nan), f"failed: {exc}"
        if ref is None:
            l2 = run.records[-1].l2_velocity
            g = run.gradient_l2l2
            p = run.pressure_l2l2
        else:
            l2 = fem.mass_norm(ops.M, run.u - ref.u)
            g2 = p2 = 0.0
            for n, s in run.states.items():
                if n < q:
                    continue
                r = ref.states[off + n * k]
                g2 += dt * gradient_norm(ops, nu, s.u - r.u) ** 2
                dp = s.p - r.p
                p2 += dt * float(dp @ (ops.Mp @ dp))
            g, p = math.sqrt(g2), math.sqrt(p2)
        return dict(l2_velocity=l2, grad=g, grad_nu=math.sqrt(nu) * g, pressure=p), ""

    for dt, (errs, note) in zip(dts, _map(one, dts, threads)):
        table.add_row(dt, note=note, **errs)
    return table


# ---------------------------------------------------------------- spatial


def spatial_convergence(
    case: ManufacturedCase,
    ns: Iterable[int] = (4, 8, 16, 32),
    q: int = 3,
    dt: float = 1.0 / 40,
    T: float = 1.0,
    mu: float = 0.0,
    newton_tol: float = 1e-12,
    meshes: Optional[Sequence[Mesh]] = None,
    threads: Optional[int] = None,
) -> ConvergenceTable:
    """Errors against h = 1/n on unit-square meshes (or ``meshes`` with their h_max).

    Columns: final-time L2 and H1-seminorm velocity errors, discrete
    l2(0,T; L2) pressure error from n >= q, the nodal-interpolation L2 error,
    and the gradient distances to the Stokes projection of the exact solution:
    ``stokes_gap`` = |grad(s_h - u_h)|, ``grad_final`` = |grad(u - u_h)|.
    """
    if meshes is None:
        items = [(1.0 / n, unit_square_mesh(n)) for n in ns]
    else:
        items = [(m.h_max, m) for m in meshes]
    sch = bdf_scheme(q)
    table = ConvergenceTable("h", meta=dict(kind="spatial", case=case.name, q=q, dt=dt, nu=case.nu, mu=mu, T=T))

    def one(item):
        h, mesh = item
        space = fem.build_mixed_space(mesh)
        st = Stepper(space, StepConfig.for_case(case, mu=mu, newton_tol=newton_tol))
        try:
            run = fixed_step_run(sch, st, T, dt, "exact", case, restrictions=QUIET)
        except StepFailure as exc:
            nan = math.nan
            return dict(
                l2_velocity=nan, h1_velocity=nan, pressure_l2l2=nan, interp_l2=nan, stokes_gap=nan, grad_final=nan
            ), f"failed: {exc}"
        rec = run.records[-1]
        ui = fem.interpolate_velocity(space, case.u, run.t)
        interp = fem.error_norms(space, ui, None, case.u, None, run.t, case.grad_u)[0]
        s, _ = stokes_projection(space, case.nu, case.stokes_rhs, run.t, bc=case.bc)
        gap = gradient_norm(st.ops, case.nu, s - run.u)
        return dict(
            l2_velocity=rec.l2_velocity,
            h1_velocity=rec.h1_velocity,
            pressure_l2l2=run.pressure_l2l2,
            interp_l2=interp,
            stokes_gap=gap,
            grad_final=rec.h1_velocity,
        ), ""

    for (h, _), (errs, note) in zip(items, _map(one, items, threads)):
        table.add_row(h, note=note, **errs)
    return table


# ---------------------------------------------------------------- robustness


@dataclass
class RobustnessTable:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def errors(self, mu: float) -> list[float]:
        return [r["l2_velocity"] for r in self.rows if r["mu"] == mu]

    def ratio(self, mu: float) -> float:
        e = self.errors(mu)
        return max(e) / min(e) if e and min(e) > 0 else math.nan

    @property
    def mus(self) -> list[float]:
        return sorted({r["mu"] for r in self.rows})

    def format(self) -> str:
        lines = [f"{'mu':>8} {'nu':>10} {'l2_velocity':>14} {'h1_velocity':>14} {'grad_nu':>14}"]
        for r in self.rows:
            lines.append(
                f"{r['mu']:>8g} {r['nu']:>10g} {r['l2_velocity']:>14.4e} {r['h1_velocity']:>14.4e} {r['grad_nu']:>14.4e}"
            )
        for mu in self.mus:
            lines.append(f"ratio max/min (mu={mu:g}): {self.ratio(mu):.4g}")
        return "\n".join(lines)

    def export(self, path) -> None:
        keys = ["mu", "nu", "l2_velocity", "h1_velocity", "grad_nu"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for r in self.rows:
                w.writerow([repr(float(r[k])) for k in keys])


def robustness_sweep(
    case_name: str = "stream2",
    nus: Sequence[float] = (1e-2, 1e-4, 1e-6),
    mus: Sequence[float] = (0.0, 0.01),
    n: int = 8,
    q: int = 2,
    dt: float = 1.0 / 20,
    T: float = 1.0,
    newton_tol: float = 1e-12,
    threads: Optional[int] = None,
    amplitude: float = 100.0,
) -> RobustnessTable:
    """Final-time errors for every (mu, nu) pair on a fixed mesh and step.

    ``amplitude`` scales the "stream2" velocity; the default gives an O(1)
    velocity so that convection, and with it the loss of accuracy of the
    unstabilized method at small nu, is visible.
    """
    space = fem.build_mixed_space(unit_square_mesh(n))
    sch = bdf_scheme(q)
    pairs = [(mu, nu) for mu in mus for nu in nus]

    def one(pair):
        mu, nu = pair
        case = get_case(case_name, nu, amplitude=amplitude)
        st = Stepper(space, StepConfig.for_case(case, mu=mu, newton_tol=newton_tol))
        run = fixed_step_run(sch, st, T, dt, "exact", case, restrictions=QUIET)
        rec = run.records[-1]
        return dict(mu=mu, nu=nu, l2_velocity=rec.l2_velocity, h1_velocity=rec.h1_velocity,
                    grad_nu=math.sqrt(nu) * rec.h1_velocity)

    rows = _map(one, pairs, threads)
    return RobustnessTable(rows, dict(case=case_name, n=n, q=q, dt=dt, T=T, amplitude=amplitude))


# ---------------------------------------------------------------- report


def report(directory, out=None) -> str:
    """Concatenate every CSV in ``directory`` (sorted by name) into one summary."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no such directory: {d}")
    parts = []
    for path in sorted(d.glob("*.csv")):
        parts.append(f"== {path.name} ==")
        parts.append(path.read_text().rstrip("\n"))
        parts.append("")
    text = "\n".join(parts) if parts else "no tables found\n"
    if out is not None:
        Path(out).write_text(text)
    return text
