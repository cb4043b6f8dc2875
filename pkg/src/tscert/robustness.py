"""Disturbance budget for which the certified invariant set stays invariant."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .certificate import CertificateParams, evaluate_V, gradient_V
from .levelset import LevelSetReport
from .lure import ConstraintPolytope, LureSystem, rhs_lure


class RobustnessError(ValueError):
    pass


@dataclass(frozen=True)
class RobustnessReport:
    mu: float
    psi1: float
    psi2: float
    sigma_min_negR: float
    PH_norm: float
    C_norm: float
    Vhat_max: float
    eta_bar: float
    norm: str = "sup over time of the Euclidean norm across machines"

    @property
    def region_Xi(self) -> str:
        return f"{{eta : ||eta||_Linf < {self.eta_bar:.6g}}}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["region_Xi"] = self.region_Xi
        d["units"] = "per-unit power"
        return d


def eta_bar_formula(sigma_min_negR: float, PH_norm: float, sigma_max_P: float, mu: float,
                    C_norm: float, Vhat_max: float) -> float:
    return sigma_min_negR / (2 * PH_norm * math.sqrt(sigma_max_P + mu * C_norm**2)) * math.sqrt(Vhat_max)


def compute_eta_bar(cert: CertificateParams, system: LureSystem, report: LevelSetReport) -> RobustnessReport:
    R = cert.assembly.R
    eig_negR = np.linalg.eigvalsh(-(R + R.T) / 2)
    sigma = float(eig_negR[0])
    if sigma <= 0:
        raise RobustnessError(f"R is not negative definite (sigma_min(-R) = {sigma:.3e})")
    if report.Vhat_max <= 0:
        raise RobustnessError("Vhat_max must be positive")
    eig_P = np.linalg.eigvalsh(cert.P)
    mu = float(np.max(cert.lam * (cert.sector.upper - cert.sector.lower), initial=0.0))
    PH = float(np.linalg.norm(cert.P @ system.H, 2))
    Cn = float(np.linalg.norm(system.C, 2))
    psi2 = float(eig_P[-1]) + mu * Cn**2
    eta = eta_bar_formula(sigma, PH, float(eig_P[-1]), mu, Cn, report.Vhat_max)
    return RobustnessReport(mu, float(eig_P[0]), psi2, sigma, PH, Cn, report.Vhat_max, eta)


@dataclass(frozen=True)
class LissCheck:
    violated: bool
    first_violation_time: float | None
    reason: str | None
    max_excess: float
    V_monotone: bool


def liss_bound_check(cert: CertificateParams, system: LureSystem, robust: RobustnessReport,
                     report: LevelSetReport, poly: ConstraintPolytope, times: np.ndarray,
                     states: np.ndarray, disturbances: np.ndarray, tol: float = 1e-9) -> LissCheck:
    """Check ``Vdot <= -sigma ||x||^2 + 2 ||PH|| ||x|| ||eta||`` and ``V <= V_max`` along samples.

    ``Vdot`` is the exact derivative of ``V`` along the Lur'e dynamics at each
    recorded state.  The dissipation bound is only claimed inside the angle
    limits, so samples outside them count as violations in their own right.
    """
    params, sector = cert.lyapunov, cert.sector
    xdot = rhs_lure(system, states, disturbances)
    vdot = np.einsum("ti,ti->t", gradient_V(params, system, sector, states), xdot)
    xn = np.linalg.norm(states, axis=1)
    en = np.linalg.norm(disturbances, axis=1)
    bound = -robust.sigma_min_negR * xn**2 + 2 * robust.PH_norm * xn * en
    V = evaluate_V(params, system, sector, states)
    theta = states @ system.C.T + system.edge_angles
    in_P = np.all(np.abs(theta) <= poly.angle_limits + tol, axis=1)
    excess = vdot - bound
    bad_bound = excess > tol * np.maximum(1.0, np.abs(bound))
    bad_level = V > report.V_max * (1 + tol)
    bad = bad_bound | bad_level | ~in_P
    first = int(np.argmax(bad)) if bad.any() else None
    reason = None
    if first is not None:
        reason = "outside angle limits" if not in_P[first] else ("V above V_max" if bad_level[first] else "dissipation bound")
    monotone = bool(np.all(np.diff(V) <= tol * np.maximum(1.0, V[:-1])))
    return LissCheck(first is not None, None if first is None else float(times[first]), reason,
                     float(np.max(excess, initial=-np.inf)), monotone)
