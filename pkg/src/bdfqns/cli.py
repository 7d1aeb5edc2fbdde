"""Command-line driver: ``bdfqns <subcommand> [options]``.

Options may also come from an INI file given with ``--config``; keys in its
``[run]`` section mirror the long flag names (dashes or underscores). Flags
given on the command line take precedence.

Exit codes: 0 success, 1 numerical failure or failed ``--assert`` check,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fem
from .bdf import DegenerateNodesError, InvalidOrderError, NumericalFailure, scheme
from .cases import get_case
from .controller import ControllerError, adaptive_run, write_step_log
from .harness import (
    export_table,
    report,
    robustness_sweep,
    spatial_convergence,
    temporal_convergence,
)
from .linsolve import SingularMatrixError, SolveAccuracyError
from .mesh import MeshError, read_mesh, unit_square_mesh
from .restrictions import RestrictionConfig
from .stepper import ConfigurationError, StepConfig, StepFailure, Stepper

log = logging.getLogger("bdfqns")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2

# coarsest step per order for the default temporal sweep (four halvings follow)
DEFAULT_DT0 = {1: 1 / 10, 2: 1 / 10, 3: 1 / 8, 4: 1 / 4, 5: 1 / 6}


class UsageError(Exception):
    pass


class AssertionFailed(Exception):
    pass


# option name -> (type, default); shared by flags and config keys
OPTIONS = {
    "case": (str, "stream2"),
    "q": (int, None),
    "qmax": (int, 3),
    "T": (float, 1.0),
    "dt": (float, None),
    "dt_list": (str, None),
    "tolr": (float, None),
    "n": (int, None),
    "ns": (str, "4,8,16,32"),
    "mesh": (str, None),
    "nu": (float, 1.0),
    "amplitude": (float, None),
    "mu": (float, 0.0),
    "nus": (str, "1e-2,1e-4,1e-6"),
    "mus": (str, "0,0.01"),
    "start": (str, None),
    "reference": (str, "yes"),
    "newton_tol": (float, 1e-12),
    "restriction_mode": (str, "warn"),
    "c_order": (float, 1.0),
    "c_cfl": (float, 1.0),
    "c_pressure": (float, 1.0),
    "out": (str, "results"),
    "vtk": (str, None),
    "dir": (str, "results"),
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add(p: argparse.ArgumentParser, *names: str) -> None:
    for name in names:
        typ, _ = OPTIONS[name]
        p.add_argument(_flag(name), dest=name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdfqns", description="BDF-q Taylor-Hood Navier-Stokes solver and verification harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *names):
        p.add_argument("--config", default=None, help="INI file with a [run] section")
        p.add_argument("--assert", dest="check", action="store_true", help="turn acceptance thresholds into exit codes")
        _add(p, *names)
        return p

    p = sub.add_parser("coeffs", help="print BDF coefficients and stability constants")
    p.add_argument("--q", type=int, required=True)

    common(sub.add_parser("converge-time", help="temporal convergence sweep"),
           "case", "amplitude", "q", "T", "dt_list", "n", "nu", "mu", "start", "reference", "newton_tol", "out")
    common(sub.add_parser("converge-space", help="spatial convergence sweep"),
           "case", "amplitude", "q", "T", "dt", "ns", "nu", "mu", "newton_tol", "out")
    common(sub.add_parser("robustness", help="error across viscosities with and without grad-div"),
           "case", "amplitude", "q", "T", "dt", "n", "nus", "mus", "newton_tol", "out")
    common(sub.add_parser("adaptive", help="variable-step, variable-order run"),
           "case", "amplitude", "qmax", "T", "tolr", "n", "mesh", "nu", "mu", "newton_tol",
           "restriction_mode", "c_order", "c_cfl", "c_pressure", "out", "vtk")
    common(sub.add_parser("stokes-proj", help="distance of the discrete solution to the Stokes projection"),
           "case", "amplitude", "q", "T", "dt", "ns", "nu", "mu", "newton_tol", "out")
    common(sub.add_parser("report", help="concatenate result tables into one summary"), "dir", "out")
    return parser


@dataclass
class Settings:
    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None


def resolve(args: argparse.Namespace) -> Settings:
    """Merge defaults, config file and flags (in increasing priority)."""
    vals = {k: d for k, (_, d) in OPTIONS.items()}
    path = getattr(args, "config", None)
    if path:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise UsageError(f"cannot parse config file {path}: {exc}") from exc
        if not cp.has_section("run"):
            raise UsageError(f"config file {path} has no [run] section")
        for key, raw in cp.items("run"):
            name = key.replace("-", "_")
            if name not in OPTIONS:
                raise UsageError(f"config file {path}: unknown key {key!r}")
            typ, _ = OPTIONS[name]
            try:
                vals[name] = typ(raw)
            except ValueError:
                raise UsageError(f"config file {path}: bad value for {key!r}: {raw!r}") from None
    for name in OPTIONS:
        v = getattr(args, name, None)
        if v is not None:
            vals[name] = v
    vals["check"] = getattr(args, "check", False)
    return Settings(vals)


def _floats(text: str, field: str) -> list[float]:
    try:
        out = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{field}: expected comma-separated numbers, got {text!r}") from None
    if not out:
        raise UsageError(f"{field}: empty list")
    return out


def _positive(value, field: str):
    if value is None or value <= 0:
        raise UsageError(f"{field} must be positive, got {value}")
    return value


def _amplitude(s: Settings, default: float) -> float:
    return _positive(s.amplitude if s.amplitude is not None else default, "amplitude")


def _check(ok: bool, message: str, failures: list[str]) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {message}")
    if not ok:
        failures.append(message)


def _outdir(s: Settings) -> Path:
    d = Path(s.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------- commands


def cmd_coeffs(args) -> int:
    sch = scheme(args.q)
    print(f"q: {sch.q}")
    print("delta: " + " ".join(str(c) for c in sch.delta_exact))
    if sch.q >= 3:
        print("gamma: " + " ".join(str(c) for c in sch.gamma_exact))
    print(f"eta: {sch.eta:g}")
    if sch.q >= 3:
        print(f"sigma: {sch.sigma:.15g}")
        print(f"s: {sch.s:.15g}")
    return EXIT_OK


def cmd_converge_time(s: Settings) -> int:
    q = s.q or 2
    scheme(q)
    n = s.n or 16
    T = _positive(s.T, "T")
    if s.dt_list:
        dts = _floats(s.dt_list, "dt_list")
    else:
        dts = [DEFAULT_DT0[q] * T / 2**k for k in range(4)]
    if s.reference not in ("yes", "no"):
        raise UsageError("reference must be 'yes' or 'no'")
    start = s.start or ("reference" if s.reference == "yes" else "exact")
    case = get_case(s.case, _positive(s.nu, "nu"), q, _amplitude(s, 1.0))
    space = fem.build_mixed_space(unit_square_mesh(n))
    table = temporal_convergence(case, q, dts, space, mu=s.mu, T=T, reference=s.reference == "yes",
                                 start=start, newton_tol=s.newton_tol)
    print(table.format())
    out = _outdir(s) / f"converge_time_q{q}.csv"
    export_table(table, out)
    print(f"wrote {out}")
    if any(table.notes):
        raise NumericalFailure("; ".join(x for x in table.notes if x))
    if s.check:
        failures: list[str] = []
        need = q - 0.2 if q <= 4 else 4.5
        orders = [o for o in table.orders("l2_velocity") if not math.isnan(o)]
        _check(bool(orders) and min(orders) >= need, f"temporal order q={q}: {orders} >= {need}", failures)
        if failures:
            raise AssertionFailed("; ".join(failures))
    return EXIT_OK


def cmd_converge_space(s: Settings, label: str = "converge_space") -> int:
    q = s.q or 3
    scheme(q)
    dt = s.dt or 1 / 40
    ns = [int(x) for x in _floats(s.ns, "ns")]
    case = get_case(s.case, _positive(s.nu, "nu"), q, _amplitude(s, 1.0))
    table = spatial_convergence(case, ns, q=q, dt=dt, T=_positive(s.T, "T"), mu=s.mu, newton_tol=s.newton_tol)
    print(table.format())
    out = _outdir(s) / f"{label}.csv"
    export_table(table, out)
    print(f"wrote {out}")
    if any(table.notes):
        raise NumericalFailure("; ".join(x for x in table.notes if x))
    if s.check:
        failures: list[str] = []
        ou = table.orders("l2_velocity")[-1]
        if label == "stokes_proj":
            og = table.orders("stokes_gap")[-1]
            of = table.orders("grad_final")[-1]
            _check(og >= 2.7, f"|grad(s_h - u_h)| order {og:.3f} >= 2.7", failures)
            _check(abs(of - 2) <= 0.3, f"|grad(u - u_h)| order {of:.3f} = 2 +- 0.3", failures)
        elif s.mu == 0:
            op = table.orders("pressure_l2l2")[-1]
            _check(abs(ou - 3) <= 0.3, f"velocity L2 order {ou:.3f} = 3 +- 0.3", failures)
            _check(abs(op - 2) <= 0.3, f"pressure l2(L2) order {op:.3f} = 2 +- 0.3", failures)
        else:
            _check(ou >= 1.7, f"velocity L2 order {ou:.3f} >= 1.7", failures)
        if failures:
            raise AssertionFailed("; ".join(failures))
    return EXIT_OK


def cmd_robustness(s: Settings) -> int:
    nus = _floats(s.nus, "nus")
    mus = _floats(s.mus, "mus")
    table = robustness_sweep(s.case, nus, mus, n=s.n or 8, q=s.q or 2, dt=s.dt or 1 / 20,
                             T=_positive(s.T, "T"), newton_tol=s.newton_tol, amplitude=_amplitude(s, 100.0))
    print(table.format())
    out = _outdir(s) / "robustness.csv"
    table.export(out)
    print(f"wrote {out}")
    if s.check:
        failures: list[str] = []
        stab = [m for m in table.mus if m > 0]
        plain = [m for m in table.mus if m == 0]
        for m in stab:
            r = table.ratio(m)
            _check(r <= 3, f"error ratio mu={m:g}: {r:.3f} <= 3", failures)
            for m0 in plain:
                r0 = table.ratio(m0)
                _check(r < r0, f"ratio mu={m:g} ({r:.3f}) < ratio mu=0 ({r0:.3f})", failures)
        if failures:
            raise AssertionFailed("; ".join(failures))
    return EXIT_OK


def cmd_adaptive(s: Settings) -> int:
    tolr = _positive(s.tolr if s.tolr is not None else 1e-6, "tolr")
    qmax = s.qmax
    if not 1 <= qmax <= 5:
        raise UsageError(f"qmax must be in 1..5, got {qmax}")
    if s.mesh:
        if not Path(s.mesh).is_file():
            raise UsageError(f"mesh file not found: {s.mesh}")
        mesh = read_mesh(s.mesh)
        markers = tuple(sorted(set(int(m) for m in mesh.boundary_markers)))
    else:
        mesh = unit_square_mesh(s.n or 8)
        markers = (1,)
    try:
        rcfg = RestrictionConfig(mode=s.restriction_mode, c_order=s.c_order, c_cfl=s.c_cfl, c_pressure=s.c_pressure)
    except ValueError as exc:
        raise UsageError(f"restriction config: {exc}") from exc
    case = get_case(s.case, _positive(s.nu, "nu"), 2, _amplitude(s, 1.0))
    space = fem.build_mixed_space(mesh, markers)
    stepper = Stepper(space, StepConfig.for_case(case, mu=s.mu, newton_tol=s.newton_tol))
    res = adaptive_run(stepper, _positive(s.T, "T"), tolr, qmax, case, restrictions=rcfg)
    d = _outdir(s)
    write_step_log(res.state, d / "step_log.csv")
    with open(d / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "dt", "q", "newton_iters", "u_norm", "l2_velocity", "h1_velocity", "l2_pressure"])
        for r in res.records:
            w.writerow([repr(r.t), repr(r.dt), r.q, r.newton_iters, repr(r.u_norm),
                        repr(r.l2_velocity), repr(r.h1_velocity), repr(r.l2_pressure)])
    if s.vtk:
        fem.write_vtk(space, res.u, res.p, s.vtk)
    st = res.state
    print(f"accepted {st.accepted}  rejected {st.rejected}  average dt {st.average_dt():.4e}  final order {st.q}")
    if res.records:
        print(f"final error L2 {res.records[-1].l2_velocity:.4e}")
    print(f"wrote {d / 'step_log.csv'} and {d / 'trajectory.csv'}")
    if s.check:
        failures: list[str] = []
        bad = [r for r in st.log if not r.accepted and not r.est > r.tol]
        _check(not bad, f"every rejected step has EST > TOL ({st.rejected} rejections)", failures)
        times = [r.t for r in res.records]
        _check(all(b > a for a, b in zip(times, times[1:])), "accepted times increase", failures)
        if failures:
            raise AssertionFailed("; ".join(failures))
    return EXIT_OK


def cmd_report(s: Settings) -> int:
    out = Path(s.out) / "report.txt" if s.out != OPTIONS["out"][1] or Path(s.out).is_dir() else None
    text = report(s.dir)
    print(text, end="" if text.endswith("\n") else "\n")
    if out is not None and Path(s.out).is_dir():
        out.write_text(text)
    return EXIT_OK


COMMANDS = {
    "converge-time": cmd_converge_time,
    "converge-space": cmd_converge_space,
    "robustness": cmd_robustness,
    "adaptive": cmd_adaptive,
    "stokes-proj": lambda s: cmd_converge_space(s, "stokes_proj"),
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "coeffs":
            return cmd_coeffs(args)
        return COMMANDS[args.command](resolve(args))
    except (UsageError, InvalidOrderError, ConfigurationError, MeshError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AssertionFailed as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StepFailure, ControllerError, NumericalFailure, SingularMatrixError, SolveAccuracyError,
            DegenerateNodesError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
