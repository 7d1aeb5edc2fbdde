import math

import numpy as np
import pytest

from bdfqns.controller import (
    ControllerError,
    ControllerState,
    adaptive_run,
    estimate_error,
    new_step,
    read_step_log,
    select_order,
    tolerance,
    write_step_log,
)
from bdfqns.cases import get_case, stream2
from bdfqns.fem import build_mixed_space
from bdfqns.mesh import channel_mesh, read_mesh, unit_square_mesh, write_mesh
from bdfqns.restrictions import RestrictionConfig, check_restrictions
from bdfqns.stepper import StepConfig, Stepper

absnorm = lambda v: float(np.linalg.norm(np.atleast_1d(v)))


@pytest.mark.parametrize("q", range(1, 6))
def test_est_vanishes_on_polynomials(q, rng):
    times = np.sort(rng.uniform(0, 1, q + 2))[::-1]
    coef = rng.standard_normal((q + 1, 3))
    vals = [sum(c * t**k for k, c in enumerate(coef)) for t in times]
    scale = max(absnorm(v) for v in vals)
    assert estimate_error(times, vals, absnorm) <= 1e-12 * scale


@pytest.mark.parametrize("q", range(1, 6))
def test_est_uniform_monomial(q):
    dt = 0.1
    times = [1.0 - i * dt for i in range(q + 2)]
    vals = [t ** (q + 1) for t in times]
    expect = dt / ((q + 1) * dt) * math.factorial(q) * dt**q
    assert estimate_error(times, vals, absnorm) == pytest.approx(expect, rel=1e-9)


def test_est_homogeneous_and_order_argument():
    times = [0.5, 0.4, 0.25, 0.1]
    vals = [np.array([np.exp(t), np.sin(t)]) for t in times]
    a = estimate_error(times, vals, absnorm)
    assert estimate_error(times, [2 * v for v in vals], absnorm) == pytest.approx(2 * a)
    assert estimate_error(times, vals, absnorm, q=1) == estimate_error(times[:3], vals[:3], absnorm)
    with pytest.raises(ValueError):
        estimate_error(times[:2], vals[:2], absnorm, q=1)


def test_tolerance_formula():
    z = np.zeros(2)
    assert tolerance(1e-3, z, z, absnorm) == pytest.approx(1e-6)
    assert tolerance(1e-4, np.array([2.0]), np.array([1.0]), absnorm) == pytest.approx(1e-4 * 2.001)
    a, b = np.array([3.0, 4.0]), np.array([1.0, 0.0])
    base = tolerance(1e-2, a, b, absnorm) - 1e-5
    assert tolerance(1e-2, 10 * a, 10 * b, absnorm) - 1e-5 == pytest.approx(10 * base)


def test_new_step_rules():
    assert new_step(0.1, 1e-5, 1e-5, 2) == pytest.approx(0.09)
    assert new_step(0.1, 0.0, 1e-5, 3) == pytest.approx(0.2)
    assert new_step(0.1, 1.0, 16.0, 1) == pytest.approx(0.2)
    assert new_step(0.1, 1e6, 1.0, 1) == pytest.approx(0.02)
    assert new_step(0.1, 1.0, 1.0, 2, max_dt=0.05) == 0.05
    # homogeneity before clamping
    assert new_step(0.3, 2.0, 1.0, 2) == pytest.approx(3 * new_step(0.1, 2.0, 1.0, 2))


def test_select_order():
    assert select_order({1: 3e-5, 2: 1e-5, 3: 2e-5}, 2, 5) == 2
    assert select_order({2: 3e-5, 3: 1e-5, 4: 2e-6}, 3, 3) == 3
    assert select_order({2: 1e-6, 3: 1e-5}, 3, 3) == 2
    assert select_order({1: 1e-5, 2: 1e-6}, 1, 5) == 2
    assert select_order({1: 1e-5}, 1, 5) == 1
    with pytest.raises(ValueError):
        select_order({1: 1.0}, 2, 3)


def test_controller_state_invariants():
    with pytest.raises(ValueError):
        ControllerState(q=1, q_max=6, tol_r=1e-3, dt=0.1)
    with pytest.raises(ValueError):
        ControllerState(q=3, q_max=2, tol_r=1e-3, dt=0.1)
    with pytest.raises(ValueError):
        ControllerState(q=1, q_max=2, tol_r=0.0, dt=0.1)


def test_restrictions():
    h = 0.1
    assert check_restrictions(h**2, 1, h, 2, RestrictionConfig())[0] == set()
    flags, _ = check_restrictions(2 * h ** (1 / 3), 3, h, 2, RestrictionConfig(cfl=False, pressure=False))
    assert flags == {"order"}
    assert check_restrictions(10.0, 5, h, 2, RestrictionConfig(mode="off")) == (set(), math.inf)
    assert check_restrictions(0.5, 2, h, 2, RestrictionConfig())[0] == {"cfl"}
    with pytest.raises(ValueError):
        RestrictionConfig(mode="hard")
    with pytest.raises(ValueError):
        RestrictionConfig(c_cfl=0.0)


@pytest.fixture(scope="module")
def short_run():
    space = build_mixed_space(unit_square_mesh(4))
    c = stream2()
    st = Stepper(space, StepConfig.for_case(c, newton_tol=1e-12))
    return adaptive_run(st, 0.5, 1e-5, 3, c)


def test_adaptive_reaches_T(short_run):
    assert short_run.t == pytest.approx(0.5)
    st = short_run.state
    assert st.accepted == len(short_run.records) and st.accepted > 5
    times = [r.t for r in short_run.records]
    assert all(b > a for a, b in zip(times, times[1:]))


def test_adaptive_accept_rule(short_run):
    for r in short_run.state.log:
        if not math.isnan(r.est):
            assert r.accepted == (r.est <= r.tol)
    assert 1 <= max(r.q for r in short_run.state.log) <= 3


def test_adaptive_order_changes_by_one(short_run):
    qs = [r.q for r in short_run.state.log if r.accepted]
    assert all(abs(a - b) <= 1 for a, b in zip(qs, qs[1:]))
    assert qs[0] == 1


def test_adaptive_start_step():
    space = build_mixed_space(unit_square_mesh(2))
    c = stream2()
    st = Stepper(space, StepConfig.for_case(c))
    res = adaptive_run(st, 0.01, 1e-4, 2, c)
    assert res.state.log[0].dt == pytest.approx(math.sqrt(1e-4) / 100)


def test_step_log_round_trip(tmp_path, short_run):
    p = tmp_path / "log.csv"
    write_step_log(short_run.state, p)
    back = read_step_log(p)
    assert len(back) == len(short_run.state.log)
    for a, b in zip(back, short_run.state.log):
        assert a.t == b.t and a.dt == b.dt and a.q == b.q and a.accepted == b.accepted
        assert (math.isnan(a.est) and math.isnan(b.est)) or a.est == b.est


def test_clamp_mode_respects_restrictions():
    space = build_mixed_space(unit_square_mesh(4))
    c = stream2()
    st = Stepper(space, StepConfig.for_case(c))
    cfg = RestrictionConfig(mode="clamp", c_cfl=0.5)
    res = adaptive_run(st, 0.2, 1e-3, 2, c, restrictions=cfg)
    h = space.mesh.h_max
    for r in res.state.log:
        if r.accepted:
            assert r.dt <= 0.5 * h**2 * (1 + 1e-12)


def test_too_many_rejections():
    space = build_mixed_space(unit_square_mesh(2))
    c = stream2()
    st = Stepper(space, StepConfig.for_case(c, newton_tol=1e-14, newton_max_iter=1))
    with pytest.raises(ControllerError):
        adaptive_run(st, 1.0, 1e-3, 2, c, max_rejections=2)


def test_channel_mesh_file_pathway(tmp_path):
    path = tmp_path / "channel.mesh"
    write_mesh(channel_mesh(8, 3, length=1.0, height=0.5), path)
    mesh = read_mesh(path)
    markers = sorted(set(mesh.boundary_markers.tolist()))
    space = build_mixed_space(mesh, markers)
    c = get_case("polyq", 1.0, 2)
    st = Stepper(space, StepConfig.for_case(c, newton_tol=1e-12))
    res = adaptive_run(st, 0.3, 1e-4, 2, c)
    assert res.t == pytest.approx(0.3)
    # quadratic-in-time, quadratic-in-space field: BDF-2 steps are exact once reached
    assert res.records[-1].l2_velocity < 1e-6
