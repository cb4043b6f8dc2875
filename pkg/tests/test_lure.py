import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_system
from tscert.lure import (
    ConstraintPolytope,
    build_lure,
    chord_slope,
    closed_form_sector,
    min_chord_slope,
    phi,
    rhs_lure,
    rhs_nonlinear,
    sector_bounds,
    xi_closed_form,
)
from tscert.network import (
    Bus,
    BusKind,
    CaseError,
    EquilibriumState,
    Line,
    PowerNetwork,
    bundled_case,
    kron_reduce,
    parse_case,
    solve_equilibrium,
)

seeds = st.integers(0, 2**32 - 1)


def eq_with(edge_angles):
    a = np.asarray(edge_angles, dtype=float)
    return EquilibriumState(a.copy(), 0.0, a, 0.0, 0)


@pytest.fixture(scope="module")
def smib():
    net = parse_case(bundled_case("smib"))
    eq = solve_equilibrium(net)
    return net, eq, build_lure(net, eq)


def test_smib_matrices(smib):
    _, _, s = smib
    np.testing.assert_array_equal(s.A, [[0, 1], [-1, -1]])
    np.testing.assert_array_equal(s.B, [[0], [1]])
    np.testing.assert_array_equal(s.C, [[1, 0]])
    np.testing.assert_array_equal(s.H, [[0], [1]])


def test_zero_coupling_leaves_damping_only():
    buses = (Bus(1, BusKind.MACHINE, 1.0, M=2.0, D=3.0), Bus(2, BusKind.MACHINE, 1.0, M=4.0, D=1.0),
             Bus(3, BusKind.INFINITE_BUS, 1.0))
    net = PowerNetwork(buses, (Line(1, 2, 0.0), Line(1, 3, 0.0)))
    s = build_lure(net, EquilibriumState(np.zeros(2), 0.0, np.zeros(2), 0.0, 0))
    np.testing.assert_array_equal(s.A[2:, :2], 0.0)
    np.testing.assert_array_equal(s.A[:2, 2:], np.eye(2))
    np.testing.assert_allclose(s.A[2:, 2:], np.diag([-1.5, -0.25]))


def test_ieee9_linearization_is_hurwitz():
    net = kron_reduce(parse_case(bundled_case("ieee9_kron")))
    s = build_lure(net, solve_equilibrium(net))
    assert np.max(np.linalg.eigvals(s.A).real) < 0
    # the edge output never sees the disturbance or the nonlinearity directly
    np.testing.assert_array_equal(s.C @ s.B, 0.0)
    np.testing.assert_array_equal(s.C @ s.H, 0.0)


def test_unreduced_network_rejected():
    net = parse_case(bundled_case("ieee9_kron"))
    with pytest.raises(CaseError):
        build_lure(net, solve_equilibrium(kron_reduce(net)))


# -- nonlinearity and sector bounds ------------------------------------------

def test_phi_values():
    assert phi(np.array([0.3]), np.array([0.0]))[0] == 0.0
    assert phi(np.array([0.0]), np.array([math.pi]))[0] == pytest.approx(-math.pi, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-6, 6))
def test_phi_matches_direct_formula(ts, z):
    direct = math.sin(ts + z) - math.sin(ts) - math.cos(ts) * z
    assert phi(np.array([ts]), np.array([z]))[0] == pytest.approx(direct, abs=1e-13)


def test_chord_slope_limit():
    assert chord_slope(np.array(0.4), 0.4) == pytest.approx(math.cos(0.4), abs=1e-15)
    t = 0.4 + 1e-9
    assert chord_slope(np.array(t), 0.4) == pytest.approx(math.cos(0.4), abs=1e-8)


def test_closed_form_wide_limits():
    sec = sector_bounds(eq_with([0.0]), ConstraintPolytope([math.pi], [1.0]))
    assert sec.lower[0] == pytest.approx(-1.0, abs=1e-12)
    assert sec.upper[0] == 0.0
    assert sec.set_kind == "wide"


def test_closed_form_right_angle_limits():
    sec = sector_bounds(eq_with([0.0]), ConstraintPolytope([math.pi / 2], [1.0]))
    assert sec.xi[0] == pytest.approx(2 / math.pi, abs=1e-15)
    assert sec.lower[0] == pytest.approx(2 / math.pi - 1, abs=1e-9)
    assert sec.lower[0] == pytest.approx(-0.36338, abs=1e-5)
    assert sec.set_kind == "right_angle"


def test_lower_bound_against_brute_force():
    ts, lim = 0.1, 2 * math.pi / 3
    grid = np.linspace(-lim, lim, 1_000_001)
    grid = grid[np.abs(grid - ts) > 1e-12]
    brute = np.min((np.sin(grid) - math.sin(ts)) / (grid - ts)) - math.cos(ts)
    sec = sector_bounds(eq_with([ts]), ConstraintPolytope([lim], [1.0]))
    assert sec.lower[0] == pytest.approx(brute, abs=1e-9)
    assert sec.lower[0] <= brute


@settings(max_examples=60, deadline=None)
@given(st.floats(-1.4, 1.4))
def test_closed_forms(ts):
    a = abs(ts)
    sec_i = sector_bounds(eq_with([ts]), ConstraintPolytope([math.pi - a], [1.0]))
    lo, hi = closed_form_sector(np.array([ts]), "wide")
    assert sec_i.lower[0] == pytest.approx(lo[0], abs=1e-6)
    assert sec_i.upper[0] == pytest.approx(hi[0], abs=1e-15)
    sec_ii = sector_bounds(eq_with([ts]), ConstraintPolytope([math.pi / 2], [1.0]))
    lo, _ = closed_form_sector(np.array([ts]), "right_angle")
    assert sec_ii.lower[0] == pytest.approx(lo[0], abs=1e-6)
    assert sec_ii.xi[0] == pytest.approx(xi_closed_form(np.array([ts]))[0], abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1.4, 1.4), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_sector_inequality(ts, frac, u):
    lim = abs(ts) + frac * (math.pi - 2 * abs(ts))
    sec = sector_bounds(eq_with([ts]), ConstraintPolytope([lim], [1.0]))
    theta = -lim + 2 * lim * u
    z = np.array([theta - ts])
    f = phi(np.array([ts]), z)
    assert ((f - sec.lower * z) * (sec.upper * z - f))[0] >= -1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(-1.4, 1.4), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_monotone_tightening(ts, f1, f2):
    span = math.pi - 2 * abs(ts)
    small, big = sorted([abs(ts) + f1 * span, abs(ts) + f2 * span])
    lo_small = min_chord_slope(ts, small)
    lo_big = min_chord_slope(ts, big)
    assert lo_small >= lo_big - 1e-12


@pytest.mark.parametrize(
    "angles, limit, match",
    [([0.2], [0.1], "strictly inside"), ([0.2], [3.0], "pi - "), ([1.6], [1.7], "pi/2")],
)
def test_polytope_validation(angles, limit, match):
    with pytest.raises(CaseError, match=match):
        ConstraintPolytope(limit, [1.0]).validate(eq_with(angles))


def test_polytope_limits_must_be_positive():
    with pytest.raises(ValueError):
        ConstraintPolytope([0.0], [1.0])


# -- right-hand sides ---------------------------------------------------------

def test_rhs_at_equilibrium_is_zero(smib):
    net, eq, s = smib
    np.testing.assert_array_equal(rhs_nonlinear(net, eq, np.zeros(2)), 0.0)
    np.testing.assert_array_equal(rhs_lure(s, np.zeros(2)), 0.0)


def test_rhs_smib_unit_frequency(smib):
    net, eq, _ = smib
    np.testing.assert_allclose(rhs_nonlinear(net, eq, np.array([0.0, 1.0])), [1.0, -1.0])


def test_lure_small_state_is_linear(smib):
    _, _, s = smib
    x = np.array([1e-6, -2e-6])
    np.testing.assert_allclose(rhs_lure(s, x), s.A @ x, rtol=1e-6)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_lure_matches_nonlinear(seed):
    net, eq, s, rng = random_system(seed)
    x = rng.uniform(-2, 2, (50, s.state_dimension))
    eta = rng.uniform(-1, 1, (50, s.n))
    a = rhs_lure(s, x, eta)
    b = rhs_nonlinear(net, eq, x, eta)
    scale = np.maximum(1.0, np.abs(b))
    assert np.max(np.abs(a - b) / scale) <= 1e-12
