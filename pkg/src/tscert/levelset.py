"""Face minimizations of the Lyapunov function and the invariant-set levels.

Each face is a full hyperplane slice of the constraint polytope (one equality,
plus the out-flow inequality for the angle faces of the invariant-set level).
Minimizing over the hyperplane lower-bounds the minimum over the facet, so the
resulting levels are conservative.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import brentq

from .certificate import CertificateParams, evaluate_V, gradient_V, hessian_V
from .lure import ConstraintPolytope, LureSystem

log = logging.getLogger(__name__)

KKT_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Face:
    id: str
    kind: str  # "outflow", "frequency" or "plain"
    index: int
    sign: int
    a: np.ndarray
    b: float
    g: np.ndarray | None = None  # optional inequality g'x <= 0


@dataclass(frozen=True, eq=False)
class FaceResult:
    face: Face
    value: float
    argmin: np.ndarray
    kkt_residual: float
    inequality_active: bool
    converged: bool
    iterations: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "face": self.face.id,
            "kind": self.face.kind,
            "value": self.value,
            "argmin": self.argmin.tolist(),
            "kkt_residual": self.kkt_residual,
            "inequality_active": self.inequality_active,
            "converged": self.converged,
        }


@dataclass(frozen=True, eq=False)
class LevelSetReport:
    outflow: list[FaceResult]
    frequency: list[FaceResult]
    plain: list[FaceResult]
    V_star: float
    W_star: float
    Vhat_star: float
    V_max: float
    Vhat_max: float
    attained_by: dict[str, str] = field(default_factory=dict)

    @property
    def all_results(self) -> list[FaceResult]:
        return self.outflow + self.frequency + self.plain

    def to_dict(self) -> dict[str, Any]:
        return {
            "V_star": self.V_star,
            "W_star": self.W_star,
            "Vhat_star": self.Vhat_star,
            "V_max": self.V_max,
            "Vhat_max": self.Vhat_max,
            "attained_by": self.attained_by,
            "problems": [r.to_dict() for r in self.all_results],
        }


class FaceSolveError(RuntimeError):
    def __init__(self, message: str, result: FaceResult):
        super().__init__(message)
        self.result = result


def _newton_on_affine(cert: CertificateParams, system: LureSystem, Aeq: np.ndarray, beq: np.ndarray,
                      tol: float, max_iter: int):
    params, sector = cert.lyapunov, cert.sector
    x = np.linalg.lstsq(Aeq, beq, rcond=None)[0]
    k = Aeq.shape[0]
    N = x.size
    f = float(evaluate_V(params, system, sector, x))
    kkt = np.inf
    for it in range(max_iter):
        g = gradient_V(params, system, sector, x)
        nu = np.linalg.lstsq(Aeq.T, -g, rcond=None)[0]
        kkt = float(np.linalg.norm(g + Aeq.T @ nu))
        if kkt <= tol:
            return x, f, kkt, nu, it, True
        K = np.zeros((N + k, N + k))
        K[:N, :N] = hessian_V(params, system, sector, x)
        K[:N, N:] = Aeq.T
        K[N:, :N] = Aeq
        dx = np.linalg.solve(K, np.concatenate([-g, np.zeros(k)]))[:N]
        slope = float(g @ dx)
        t = 1.0
        while True:
            xn = x + t * dx
            fn = float(evaluate_V(params, system, sector, xn))
            if fn <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if fn > f and t < 1e-12:
            break  # no further progress possible in floating point
        x, f = xn, fn
    return x, f, kkt, None, max_iter, kkt <= tol


def minimize_V_on_face(cert: CertificateParams, system: LureSystem, face: Face,
                       tol: float = KKT_TOL, max_iter: int = 100, strict: bool = True) -> FaceResult:
    """Minimize ``V`` over ``{a'x = b}`` and, if given, ``g'x <= 0``.

    The hyperplane problem is solved first; if its minimizer violates the
    inequality the problem is re-solved with the inequality as a second
    equality (exact for one linear inequality and a strongly convex ``V``).
    """
    Aeq = face.a[None, :]
    beq = np.array([face.b])
    x, f, kkt, _, it, ok = _newton_on_affine(cert, system, Aeq, beq, tol, max_iter)
    active = False
    if face.g is not None and float(face.g @ x) > 0:
        active = True
        Aeq = np.vstack([face.a, face.g])
        beq = np.array([face.b, 0.0])
        x, f, kkt, _, it2, ok = _newton_on_affine(cert, system, Aeq, beq, tol, max_iter)
        it += it2
    res = FaceResult(face, f, x, kkt, active, ok, it)
    if not ok and strict:
        raise FaceSolveError(f"face {face.id}: KKT residual {kkt:.3e} after {it} iterations", res)
    return res


def build_faces(system: LureSystem, poly: ConstraintPolytope, edge_labels: list[str] | None = None):
    """The out-flow, frequency and plain faces, in that order."""
    n, m = system.n, system.edge_count
    N = 2 * n
    ts = system.edge_angles
    E = system.C[:, :n].T
    labels = edge_labels or [str(k) for k in range(m)]
    outflow, plain, freq = [], [], []
    for k in range(m):
        a = system.C[k].copy()
        dw = np.concatenate([np.zeros(n), E[:, k]])  # omega_i - omega_j
        for sign, tag in ((-1, "-"), (1, "+")):
            b = sign * poly.angle_limits[k] - ts[k]
            # out-flow on the minus face is omega_i <= omega_j, on the plus face omega_i >= omega_j
            outflow.append(Face(f"outflow:{labels[k]}:{tag}", "outflow", k, sign, a, b, sign * -dw))
            plain.append(Face(f"plain:{labels[k]}:{tag}", "plain", k, sign, a, b))
    for i in range(n):
        a = np.zeros(N)
        a[n + i] = 1.0
        for sign, tag in ((-1, "-"), (1, "+")):
            freq.append(Face(f"frequency:{i}:{tag}", "frequency", i, sign, a, sign * poly.frequency_limits[i]))
    return outflow, freq, plain


def compute_level_sets(cert: CertificateParams, system: LureSystem, poly: ConstraintPolytope,
                       edge_labels: list[str] | None = None) -> LevelSetReport:
    outflow_faces, freq_faces, plain_faces = build_faces(system, poly, edge_labels)
    plain = [minimize_V_on_face(cert, system, f) for f in plain_faces]
    outflow = []
    for face, base in zip(outflow_faces, plain):
        if float(face.g @ base.argmin) <= 0:
            # hyperplane minimizer already satisfies the out-flow inequality
            outflow.append(FaceResult(face, base.value, base.argmin, base.kkt_residual, False, True, 0))
        else:
            outflow.append(minimize_V_on_face(cert, system, face))
    freq = [minimize_V_on_face(cert, system, f) for f in freq_faces]

    def arg(results):
        r = min(results, key=lambda r: r.value)
        return r.value, r.face.id

    V_star, v_id = arg(outflow)
    W_star, w_id = arg(freq)
    Vh_star, vh_id = arg(plain)
    attained = {
        "V_star": v_id,
        "W_star": w_id,
        "Vhat_star": vh_id,
        "V_max": v_id if V_star <= W_star else w_id,
        "Vhat_max": vh_id if Vh_star <= W_star else w_id,
    }
    return LevelSetReport(outflow, freq, plain, V_star, W_star, Vh_star,
                          min(V_star, W_star), min(Vh_star, W_star), attained)


def membership_X(cert: CertificateParams, report: LevelSetReport, system: LureSystem,
                 poly: ConstraintPolytope, x: np.ndarray) -> np.ndarray | bool:
    """``V(x) <= V_max`` and every line angle within its limit (batched)."""
    x = np.asarray(x, dtype=float)
    V = evaluate_V(cert.lyapunov, system, cert.sector, x)
    theta = x @ system.C.T + system.edge_angles
    inside = (V <= report.V_max) & np.all(np.abs(theta) <= poly.angle_limits, axis=-1)
    return bool(inside) if np.ndim(inside) == 0 else inside


def sublevel_extent(cert: CertificateParams, system: LureSystem, direction: np.ndarray, level: float) -> float:
    """Largest ``d'x`` over ``{V(x) <= level}`` (``d`` need not be normalized)."""
    d = np.asarray(direction, dtype=float)

    def h(t):
        face = Face("extent", "plain", -1, 1, d, t)
        return minimize_V_on_face(cert, system, face, strict=False).value - level

    hi = 1.0
    while h(hi) < 0:
        hi *= 2.0
    return brentq(h, 0.0, hi, xtol=1e-12)
