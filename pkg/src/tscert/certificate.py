"""Convex Lyapunov function, the LMI matrix ``R`` and a search for feasible parameters.

``V(x) = x'Px + 2 sum_k lam_k int_0^{z_k} (upper_k s - phi_k(s)) ds`` with the
integral in closed form.  ``R`` is affine in ``(P, lam, Gamma)``; the search
minimizes its largest eigenvalue by projected subgradient steps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg

from .lure import LureSystem, SectorBounds, phi

log = logging.getLogger(__name__)

EPS_P = 1e-6
EPS_GAMMA = 1e-6
EPS_R = 1e-8
BUDGET = 50_000


@dataclass(frozen=True, eq=False)
class LyapunovParams:
    P: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        lam = np.asarray(self.lam, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(P))):
            raise ValueError("P must be symmetric")
        if np.any(lam < 0):
            raise ValueError("edge weights lam must be non-negative")
        object.__setattr__(self, "P", (P + P.T) / 2)
        object.__setattr__(self, "lam", lam)


@dataclass(frozen=True, eq=False)
class LmiAssembly:
    gamma: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    Qtilde: np.ndarray
    asymmetry: float
    max_eig_R: float

    def blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        N = self.R.shape[0] - self.gamma.size
        return self.R[:N, :N], self.R[:N, N:], self.R[N:, N:]


@dataclass(frozen=True)
class MarginReport:
    max_eig_R: float
    min_eig_P: float
    min_gamma: float
    accepted: bool

    @property
    def margin(self) -> float:
        return -self.max_eig_R


@dataclass(frozen=True, eq=False)
class CertificateParams:
    lyapunov: LyapunovParams
    assembly: LmiAssembly
    sector: SectorBounds
    margin: float
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def P(self) -> np.ndarray:
        return self.lyapunov.P

    @property
    def lam(self) -> np.ndarray:
        return self.lyapunov.lam

    @property
    def gamma(self) -> np.ndarray:
        return self.assembly.gamma

    def to_dict(self) -> dict[str, Any]:
        N = self.P.shape[0]
        return {
            "P_shape": [N, N],
            "P": self.P.ravel().tolist(),
            "lambda": self.lam.tolist(),
            "gamma": self.gamma.tolist(),
            "sector": self.sector.to_dict(),
            "margin": self.margin,
            "max_eig_R": self.assembly.max_eig_R,
            "search": self.meta,
        }


class CertificateSearchError(RuntimeError):
    """The search did not find a certificate; carries the best report found."""

    def __init__(self, message: str, best: MarginReport | None = None, meta: dict | None = None):
        super().__init__(message)
        self.best = best
        self.meta = meta or {}


# ---------------------------------------------------------------------------
# Lyapunov function

def _path_integral(edge_angles, upper, z):
    c, s = np.cos(edge_angles), np.sin(edge_angles)
    # int_0^z (upper*u - phi(u)) du using the antiderivative of sin; the
    # cos/sin differences are written to stay accurate for small z
    return (upper + c) * z**2 / 2 - 2 * c * np.sin(z / 2) ** 2 - s * (np.sin(z) - z)


def evaluate_V(params: LyapunovParams, system: LureSystem, sector: SectorBounds, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    z = x @ system.C.T
    quad = np.einsum("...i,ij,...j->...", x, params.P, x)
    return quad + 2 * _path_integral(system.edge_angles, sector.upper, z) @ params.lam


def gradient_V(params: LyapunovParams, system: LureSystem, sector: SectorBounds, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    z = x @ system.C.T
    w = params.lam * (sector.upper * z - phi(system.edge_angles, z))
    return 2 * x @ params.P + 2 * w @ system.C


def hessian_V(params: LyapunovParams, system: LureSystem, sector: SectorBounds, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    z = system.C @ x
    ts = system.edge_angles
    # upper - phi'(z); equals 1 - cos(theta_ij) for the standard upper bound
    curv = sector.upper + np.cos(ts) - np.cos(ts + z)
    return 2 * params.P + system.C.T @ np.diag(2 * params.lam * curv) @ system.C


def V_dot(params: LyapunovParams, system: LureSystem, sector: SectorBounds, x, xdot) -> np.ndarray:
    return np.einsum("...i,...i->...", gradient_V(params, system, sector, x), xdot)


# ---------------------------------------------------------------------------
# LMI assembly

def _r_matrix(A, B, C, P, lam, gamma, lower, upper) -> np.ndarray:
    Lam, Gam = np.diag(lam), np.diag(gamma)
    Dl, Du = np.diag(lower), np.diag(upper)
    R11 = A.T @ (P + C.T @ Lam @ Du @ C) + (P + C.T @ Du @ Lam @ C) @ A - 2 * C.T @ Dl @ Gam @ Du @ C
    R12 = -P @ B - A.T @ C.T @ Lam + C.T @ (Dl + Du) @ Gam
    R22 = -2 * Gam
    return np.block([[R11, R12], [R12.T, R22]])


def _q_matrices(A, B, C, P, lam, gamma, lower, upper) -> tuple[np.ndarray, np.ndarray]:
    # derivative form: Vdot = 2 x'Pt xdot - 2 phi' Lam C xdot with Pt = P + C' Lam Du C
    m = C.shape[0]
    Pt = P + C.T @ ((lam * upper)[:, None] * C)
    Q11 = Pt @ A
    Q11 = Q11 + Q11.T
    Q12 = -P @ B - (lam[:, None] * (C @ A)).T
    Q = np.block([[Q11, Q12], [Q12.T, np.zeros((m, m))]])
    # sector form: 2 (phi - Du z)' Gam (phi - Dl z) as a quadratic in (x, phi)
    F = np.block([[-upper[:, None] * C, np.eye(m)]])
    G = np.block([[-lower[:, None] * C, np.eye(m)]])
    S = F.T @ (gamma[:, None] * G)
    return Q, S + S.T


def assemble_R(params: LyapunovParams, system: LureSystem, sector: SectorBounds, gamma: np.ndarray) -> LmiAssembly:
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (system.edge_count,) or np.any(gamma <= 0):
        raise ValueError("gamma must be a positive vector with one entry per edge")
    args = (system.A, system.B, system.C, params.P, params.lam, gamma, sector.lower, sector.upper)
    R = _r_matrix(*args)
    Q, Qt = _q_matrices(*args)
    scale = max(1.0, float(np.max(np.abs(R))))
    mismatch = float(np.max(np.abs(R - (Q - Qt))))
    if mismatch > 1e-12 * scale:
        raise AssertionError(f"R and Q - Qtilde disagree by {mismatch:.3e}")
    asym = float(np.max(np.abs(R - R.T)))
    if asym > 1e-9 * scale:
        raise AssertionError(f"R asymmetric by {asym:.3e}")
    R = (R + R.T) / 2
    return LmiAssembly(gamma, R, Q, Qt, asym, float(np.linalg.eigvalsh(R)[-1]))


def verify_certificate(
    assembly: LmiAssembly,
    params: LyapunovParams,
    eps_P: float = EPS_P,
    eps_gamma: float = EPS_GAMMA,
    eps_R: float = EPS_R,
) -> MarginReport:
    max_eig = float(np.linalg.eigvalsh((assembly.R + assembly.R.T) / 2)[-1])
    min_p = float(np.linalg.eigvalsh(params.P)[0])
    min_g = float(np.min(assembly.gamma))
    ok = max_eig <= -eps_R and min_p >= eps_P and min_g >= eps_gamma
    return MarginReport(max_eig, min_p, min_g, ok)


# ---------------------------------------------------------------------------
# search

class _Parameterization:
    """Orthonormal coordinates for (P, lam, gamma) and the linear map to R."""

    def __init__(self, system: LureSystem, sector: SectorBounds):
        N, m = system.state_dimension, system.edge_count
        self.N, self.m = N, m
        self.iu = np.triu_indices(N)
        self.offdiag = self.iu[0] != self.iu[1]
        nP = len(self.iu[0])
        self.dim = nP + 2 * m
        basis = []
        for v in np.eye(self.dim):
            P, lam, gam = self.unpack(v)
            basis.append(_r_matrix(system.A, system.B, system.C, P, lam, gam, sector.lower, sector.upper))
        self.basis = np.array(basis)

    def unpack(self, v):
        N, m = self.N, self.m
        nP = len(self.iu[0])
        w = v[:nP].copy()
        w[self.offdiag] /= np.sqrt(2.0)
        P = np.zeros((N, N))
        P[self.iu] = w
        P = P + np.triu(P, 1).T
        return P, v[nP:nP + m], v[nP + m:]

    def pack(self, P, lam, gam):
        w = P[self.iu].copy()
        w[self.offdiag] *= np.sqrt(2.0)
        return np.concatenate([w, lam, gam])

    def R(self, v):
        return np.tensordot(v, self.basis, axes=1)


def _project(par: _Parameterization, v, eps_P, eps_gamma, caps):
    P, lam, gam = par.unpack(v)
    w, U = np.linalg.eigh(P)
    P = (U * np.clip(w, eps_P, 1.0)) @ U.T
    lam = np.clip(lam, 0.0, caps[0])
    gam = np.clip(gam, eps_gamma, caps[1])
    return par.pack(P, lam, gam)


def find_certificate(
    system: LureSystem,
    sector: SectorBounds,
    *,
    eps_P: float = EPS_P,
    eps_gamma: float = EPS_GAMMA,
    eps_R: float = EPS_R,
    budget: int = BUDGET,
    step_a: float = 1.0,
    step_b: float = 10.0,
    caps: tuple[float, float] = (1e3, 1e3),
    patience: int | None = 5_000,
) -> CertificateParams:
    """Minimize ``lambda_max(R)`` over the normalized parameter set.

    ``P`` is kept in ``eps_P I <= P <= I`` (``R`` is homogeneous, so some
    normalization is needed for the margin to mean anything).  The search runs
    past first feasibility to enlarge the margin and stops when the budget is
    spent or the best value has not improved for ``patience`` iterations.
    Raises :class:`CertificateSearchError` when ``A`` is not Hurwitz or no
    iterate reaches ``lambda_max(R) <= -eps_R``; that does not prove the LMI
    infeasible.
    """
    eig_A = np.linalg.eigvals(system.A)
    if np.max(eig_A.real) >= 0:
        raise CertificateSearchError(
            f"A is not Hurwitz (max real eigenvalue {np.max(eig_A.real):.3e})",
            meta={"reason": "non_hurwitz"},
        )
    par = _Parameterization(system, sector)
    P0 = scipy.linalg.solve_continuous_lyapunov(system.A.T, -np.eye(system.state_dimension))
    P0 = (P0 + P0.T) / 2
    P0 /= np.linalg.eigvalsh(P0)[-1]
    v = _project(par, par.pack(P0, np.zeros(par.m), np.full(par.m, eps_gamma)), eps_P, eps_gamma, caps)

    best_v, best_val, best_it = v, np.inf, 0
    it = 0
    for it in range(budget):
        w, U = np.linalg.eigh(par.R(v))
        val = w[-1]
        if val < best_val - 1e-14 * max(1.0, abs(val)):
            best_v, best_val, best_it = v, val, it
        elif patience is not None and best_val <= -eps_R and it - best_it > patience:
            break
        u = U[:, -1]
        g = np.einsum("i,kij,j->k", u, par.basis, u)
        gn = np.linalg.norm(g)
        if gn == 0:
            break
        v = _project(par, v - step_a / (step_b + it) * g / gn, eps_P, eps_gamma, caps)

    P, lam, gam = par.unpack(best_v)
    params = LyapunovParams(P, lam)
    meta = {
        "iterations": it + 1,
        "best_iteration": best_it,
        "budget": budget,
        "eps_P": eps_P,
        "eps_gamma": eps_gamma,
        "eps_R": eps_R,
        "step": [step_a, step_b],
        "normalization": "eps_P*I <= P <= I",
    }
    asm = assemble_R(params, system, sector, gam)
    report = verify_certificate(asm, params, eps_P, eps_gamma, eps_R)
    log.info("certificate search: lambda_max(R) = %.3e after %d iterations", report.max_eig_R, it + 1)
    if not report.accepted:
        raise CertificateSearchError(
            f"no certificate within budget (best lambda_max(R) = {report.max_eig_R:.3e})", report, meta
        )
    return CertificateParams(params, asm, sector, report.margin, meta)


def certificate_from_dict(d: dict[str, Any], system: LureSystem) -> CertificateParams:
    N = d["P_shape"][0]
    params = LyapunovParams(np.asarray(d["P"], dtype=float).reshape(N, N), np.asarray(d["lambda"], dtype=float))
    sector = SectorBounds.from_dict(d["sector"])
    asm = assemble_R(params, system, sector, np.asarray(d["gamma"], dtype=float))
    return CertificateParams(params, asm, sector, -asm.max_eig_R, dict(d.get("search", {})))
