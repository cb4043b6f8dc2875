"""Lur'e representation of the swing dynamics and sector bounds on its nonlinearity.

State ``x = (theta - theta*, omega)`` over the non-reference machines; the
edge output is ``z = C x`` (line angle deviations).  All right-hand sides accept
a leading batch dimension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import CaseError, EquilibriumState, PowerNetwork

GRID_POINTS = 10_000
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class LureSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    H: np.ndarray
    equilibrium: EquilibriumState

    @property
    def state_dimension(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[0] // 2

    @property
    def edge_count(self) -> int:
        return self.C.shape[0]

    @property
    def edge_angles(self) -> np.ndarray:
        return self.equilibrium.edge_angles


@dataclass(frozen=True, eq=False)
class ConstraintPolytope:
    """``|theta_ij| <= angle_limits[k]`` per edge and ``|omega_i| <= frequency_limits[i]``."""

    angle_limits: np.ndarray
    frequency_limits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "angle_limits", np.asarray(self.angle_limits, dtype=float))
        object.__setattr__(self, "frequency_limits", np.asarray(self.frequency_limits, dtype=float))
        if np.any(self.angle_limits <= 0) or np.any(self.frequency_limits <= 0):
            raise ValueError("constraint limits must be positive")

    @classmethod
    def uniform(cls, theta_max: float, omega_max: float, edges: int, machines: int) -> ConstraintPolytope:
        return cls(np.full(edges, float(theta_max)), np.full(machines, float(omega_max)))

    def validate(self, eq: EquilibriumState) -> None:
        """Equilibrium must be interior and the limits within the accepted range."""
        th = np.abs(eq.edge_angles)
        if self.angle_limits.shape != th.shape:
            raise CaseError("theta_max", f"expected {th.size} angle limits, got {self.angle_limits.size}")
        if np.any(th >= math.pi / 2):
            raise CaseError("equilibrium", "a line angle is outside (-pi/2, pi/2)")
        if np.any(self.angle_limits <= th):
            raise CaseError("theta_max", "equilibrium line angle not strictly inside the angle limits")
        if np.any(self.angle_limits > math.pi - th + 1e-12):
            raise CaseError("theta_max", "angle limit exceeds pi - |theta*_ij|")
        if self.frequency_limits.shape != (eq.angles.size,):
            raise CaseError("omega_max", f"expected {eq.angles.size} frequency limits")


@dataclass(frozen=True, eq=False)
class SectorBounds:
    lower: np.ndarray
    upper: np.ndarray
    xi: np.ndarray
    chord_min: np.ndarray
    set_kind: str

    def to_dict(self) -> dict:
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "xi": self.xi.tolist(),
            "chord_min": self.chord_min.tolist(),
            "set_kind": self.set_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SectorBounds:
        return cls(*(np.asarray(d[k], dtype=float) for k in ("lower", "upper", "xi", "chord_min")), d["set_kind"])


def build_lure(net: PowerNetwork, eq: EquilibriumState) -> LureSystem:
    if not net.is_reduced:
        raise CaseError("buses", "Lur'e form needs a reduced network")
    E, y = net.incidence, net.edge_weights
    n, m = E.shape
    if eq.angles.shape != (n,) or eq.edge_angles.shape != (m,):
        raise ValueError(f"equilibrium dimensions {eq.angles.shape}/{eq.edge_angles.shape} do not match network ({n}, {m})")
    Minv = np.diag(1.0 / net.inertia)
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -Minv @ E @ np.diag(y * np.cos(eq.edge_angles)) @ E.T
    A[n:, n:] = -Minv @ np.diag(net.damping)
    B = np.vstack([np.zeros((n, m)), Minv @ E @ np.diag(y)])
    C = np.hstack([E.T, np.zeros((m, n))])
    H = np.vstack([np.zeros((n, n)), Minv])
    return LureSystem(A, B, C, H, eq)


def phi(edge_angles: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Decentralized nonlinearity for equilibrium line angles ``edge_angles``."""
    c, s = np.cos(edge_angles), np.sin(edge_angles)
    # sin(t*+z) - sin t* - cos t* z, arranged to avoid cancellation near z = 0
    return c * (np.sin(z) - z) - 2.0 * s * np.sin(z / 2) ** 2


def nonlinearity_phi(system: LureSystem, z: np.ndarray) -> np.ndarray:
    return phi(system.edge_angles, np.asarray(z, dtype=float))


def chord_slope(theta: np.ndarray, theta_star: float | np.ndarray) -> np.ndarray:
    """``(sin theta - sin theta*) / (theta - theta*)``, equal to ``cos theta*`` at the node."""
    half = (np.asarray(theta) - theta_star) / 2.0
    return np.cos((np.asarray(theta) + theta_star) / 2.0) * np.sinc(half / math.pi)


def closed_form_sector(theta_star: np.ndarray, limits: str) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form sector bounds for ``"wide"`` limits (pi - |theta*|) or ``"right_angle"`` limits (pi/2)."""
    c = np.cos(theta_star)
    if limits == "wide":
        return -c, 1.0 - c
    if limits == "right_angle":
        return xi_closed_form(theta_star) - c, 1.0 - c
    raise ValueError(limits)


def xi_closed_form(theta_star: np.ndarray) -> np.ndarray:
    a = np.abs(np.asarray(theta_star, dtype=float))
    return (1.0 - np.sin(a)) / (math.pi / 2 - a)


def _golden_min(f, lo: float, hi: float, tol: float = 1e-13) -> tuple[float, float]:
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol * max(1.0, abs(a) + abs(b)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    x = (a + b) / 2
    return x, f(x)


def min_chord_slope(theta_star: float, limit: float, points: int = GRID_POINTS) -> float:
    """Infimum of the chord slope over ``theta in [-limit, limit]``."""
    grid = np.linspace(-limit, limit, points)
    vals = chord_slope(grid, theta_star)
    k = int(np.argmin(vals))
    best = float(vals[k])
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, points - 1)]
    if hi > lo:
        _, refined = _golden_min(lambda t: float(chord_slope(t, theta_star)), lo, hi)
        best = min(best, refined)
    return best


def sector_bounds(eq: EquilibriumState, poly: ConstraintPolytope) -> SectorBounds:
    """Tightest static sector ``[lower, upper]`` for each edge over the angle limits."""
    poly.validate(eq)
    ts = eq.edge_angles
    chord = np.array([min_chord_slope(t, lim) for t, lim in zip(ts, poly.angle_limits)])
    lower = chord - np.cos(ts)
    upper = 1.0 - np.cos(ts)
    if np.allclose(poly.angle_limits, math.pi / 2):
        kind = "right_angle"
    elif np.allclose(poly.angle_limits, math.pi - np.abs(ts)):
        kind = "wide"
    else:
        kind = "general"
    return SectorBounds(lower, upper, xi_closed_form(ts), chord, kind)


def rhs_nonlinear(net: PowerNetwork, eq: EquilibriumState, x: np.ndarray, eta: np.ndarray | None = None) -> np.ndarray:
    """Swing dynamics in shifted coordinates, straight from the power-flow equations."""
    x = np.asarray(x, dtype=float)
    n = eq.angles.size
    theta = x[..., :n] + eq.angles
    omega = x[..., n:]
    flows = (net.edge_weights * np.sin(net.edge_angles(theta))) @ net.incidence.T
    acc = net.injection - flows - net.damping * omega
    if eta is not None:
        acc = acc + eta
    return np.concatenate([omega, acc / net.inertia], axis=-1)


def rhs_lure(system: LureSystem, x: np.ndarray, eta: np.ndarray | None = None) -> np.ndarray:
    """``A x - B phi(C x) + H eta``."""
    x = np.asarray(x, dtype=float)
    z = x @ system.C.T
    out = x @ system.A.T - nonlinearity_phi(system, z) @ system.B.T
    if eta is not None:
        out = out + np.asarray(eta) @ system.H.T
    return out
