"""Fixed-step RK4 simulation of the disturbed swing dynamics and Monte Carlo studies.

Integration runs on batches of states so that Monte Carlo trials share every
vectorized operation; a single trajectory is a batch of one.  Disturbances are
held constant over each step and only change at switch instants.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .certificate import CertificateParams, evaluate_V
from .levelset import LevelSetReport, membership_X, sublevel_extent
from .lure import ConstraintPolytope, LureSystem
from .network import EquilibriumState, PowerNetwork

log = logging.getLogger(__name__)

DISTURBANCE_KINDS = ("zero", "constant_direction", "piecewise_constant_random", "adversarial_aligned")
CONVERGENCE_RADIUS = 1e-3
# slack for floating-point round-off in exit detection
EXIT_RTOL = 1e-9


@dataclass(frozen=True)
class DisturbanceSignal:
    """Norm-bounded disturbance: ``||eta(t)|| <= magnitude`` at every instant.

    ``norm="componentwise"`` bounds each machine separately (``|eta_i| <=
    magnitude``) instead of the Euclidean norm across machines.
    """

    kind: str = "zero"
    magnitude: float = 0.0
    switch_period: float = 0.05
    seed: int = 0
    norm: str = "euclidean"

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.magnitude < 0 or self.switch_period <= 0:
            raise ValueError("magnitude must be >= 0 and switch_period > 0")
        if self.norm not in ("euclidean", "componentwise"):
            raise ValueError(f"unknown norm {self.norm!r}")


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    initial_state: np.ndarray
    disturbance: DisturbanceSignal = DisturbanceSignal()
    step: float = 1e-3
    horizon: float = 50.0

    def __post_init__(self):
        if self.step <= 0 or self.horizon <= 0:
            raise ValueError("step and horizon must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.step))


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    disturbances: np.ndarray
    V_values: np.ndarray | None
    membership_flags: np.ndarray | None
    scenario: ScenarioSpec
    diverged: bool = False

    def to_csv(self, path: str | Path, eq: EquilibriumState) -> None:
        """Columns ``t, theta_1..n, omega_1..n, eta_1..n, V, in_X``; angles are absolute."""
        n = eq.angles.size
        header = (["t"] + [f"theta_{i + 1}" for i in range(n)] + [f"omega_{i + 1}" for i in range(n)]
                  + [f"eta_{i + 1}" for i in range(n)] + ["V", "in_X"])
        V = self.V_values if self.V_values is not None else np.full(self.times.size, np.nan)
        flags = self.membership_flags if self.membership_flags is not None else np.zeros(self.times.size, bool)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(self.times.size):
                x = self.states[k]
                w.writerow([f"{self.times[k]:.6f}", *(f"{v:.12g}" for v in x[:n] + eq.angles),
                            *(f"{v:.12g}" for v in x[n:]), *(f"{v:.12g}" for v in self.disturbances[k]),
                            f"{V[k]:.12g}", int(flags[k])])


class SwingField:
    """Precomputed right-hand side of the swing equation in shifted coordinates."""

    def __init__(self, net: PowerNetwork, eq: EquilibriumState):
        self.E = np.array(net.incidence)
        self.y = np.array(net.edge_weights)
        self.P = np.array(net.injection)
        self.D = np.array(net.damping)
        self.Minv = 1.0 / np.array(net.inertia)
        self.theta_star = eq.angles
        self.n = eq.angles.size

    def __call__(self, x: np.ndarray, eta: np.ndarray | None = None) -> np.ndarray:
        n = self.n
        omega = x[..., n:]
        flows = (self.y * np.sin((x[..., :n] + self.theta_star) @ self.E)) @ self.E.T
        acc = self.P - flows - self.D * omega
        if eta is not None:
            acc = acc + eta
        return np.concatenate([omega, acc * self.Minv], axis=-1)


def _child_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


class _DisturbanceBatch:
    """Generates disturbances for a batch of trials, one RNG stream per trial."""

    def __init__(self, signals: list[DisturbanceSignal], n: int, step: float, PH: np.ndarray | None):
        self.signals = signals
        self.n = n
        kinds = {s.kind for s in signals}
        if len(kinds) != 1 or len({s.switch_period for s in signals}) != 1 or len({s.norm for s in signals}) != 1:
            raise ValueError("a batch must share kind, norm and switch period")
        self.kind = kinds.pop()
        self.norm = signals[0].norm
        self.mag = np.array([s.magnitude for s in signals])
        self.every = max(1, int(round(signals[0].switch_period / step)))
        self.rngs = [np.random.default_rng([s.seed, 1]) for s in signals]
        self.PH = PH
        if self.kind == "adversarial_aligned" and PH is None:
            raise ValueError("adversarial disturbances need a certificate")
        self.current = np.zeros((len(signals), n))
        if self.kind == "constant_direction":
            self.current = self._scale(np.array([self._random_direction(r) for r in self.rngs]))

    def _random_direction(self, rng) -> np.ndarray:
        if self.norm == "componentwise":
            return rng.choice([-1.0, 1.0], size=self.n)
        v = rng.standard_normal(self.n)
        return v / np.linalg.norm(v)

    def _scale(self, direction: np.ndarray) -> np.ndarray:
        if self.norm == "componentwise":
            eta = np.sign(direction) * self.mag[:, None]
            return np.clip(eta, -self.mag[:, None], self.mag[:, None])
        eta = direction * self.mag[:, None]
        nrm = np.linalg.norm(eta, axis=1)
        over = nrm > self.mag
        while np.any(over):
            eta[over] *= (self.mag[over] / nrm[over] * (1 - 2.0**-50))[:, None]
            nrm = np.linalg.norm(eta, axis=1)
            over = nrm > self.mag
        return eta

    def __call__(self, k: int, x: np.ndarray) -> np.ndarray:
        if self.kind in ("zero", "constant_direction") or k % self.every:
            return self.current
        if self.kind == "piecewise_constant_random":
            self.current = self._scale(np.array([self._random_direction(r) for r in self.rngs]))
        else:
            g = x @ self.PH  # (PH)' x per trial
            if self.norm == "componentwise":
                self.current = self._scale(np.where(g >= 0, 1.0, -1.0))
            else:
                nrm = np.linalg.norm(g, axis=1, keepdims=True)
                d = np.where(nrm > 0, g / np.where(nrm > 0, nrm, 1.0), 0.0)
                self.current = self._scale(d)
        return self.current


def _rk4(f: Callable, x0: np.ndarray, eta_fn: Callable, step: float, n_steps: int,
         observe: Callable[[int, np.ndarray, np.ndarray], None]) -> tuple[np.ndarray, int | None]:
    """Classic RK4 on a batch; stops early and returns the step index on non-finite state."""
    x = np.array(x0, dtype=float)
    h = step
    for k in range(n_steps):
        eta = eta_fn(k, x)
        # overflow is detected below and reported as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = f(x, eta)
            k2 = f(x + 0.5 * h * k1, eta)
            k3 = f(x + 0.5 * h * k2, eta)
            k4 = f(x + h * k3, eta)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            return x, k + 1
        observe(k + 1, x, eta)
    return x, None


def integrate_linear_proxy(rate: float, x0: float, step: float, horizon: float) -> float:
    """RK4 on ``xdot = -rate x``; used to check the integrator's order."""
    out, _ = _rk4(lambda x, eta: -rate * x, np.array([[x0]]), lambda k, x: None, step,
                  int(round(horizon / step)), lambda *a: None)
    return float(out[0, 0])


def integrate(net: PowerNetwork, eq: EquilibriumState, scenario: ScenarioSpec,
              certificate: CertificateParams | None = None, system: LureSystem | None = None,
              report: LevelSetReport | None = None, poly: ConstraintPolytope | None = None) -> Trajectory:
    """Integrate one scenario; ``V`` and membership are recorded when a certificate is attached."""
    field_ = SwingField(net, eq)
    n = eq.angles.size
    steps = scenario.n_steps
    PH = certificate.P @ system.H if certificate is not None and system is not None else None
    dist = _DisturbanceBatch([scenario.disturbance], n, scenario.step, PH)
    states = np.empty((steps + 1, 2 * n))
    etas = np.zeros((steps + 1, n))
    states[0] = scenario.initial_state

    def observe(k, x, eta):
        states[k] = x[0]
        etas[k - 1] = eta[0]

    _, bad = _rk4(field_, states[:1], dist, scenario.step, steps, observe)
    last = steps if bad is None else bad - 1
    if bad is not None:
        log.warning("trajectory diverged at t = %.4f s", bad * scenario.step)
    states, etas = states[: last + 1], etas[: last + 1]
    if last >= 1:
        etas[last] = etas[last - 1]
    times = np.arange(last + 1) * scenario.step
    V = flags = None
    if certificate is not None and system is not None:
        V = evaluate_V(certificate.lyapunov, system, certificate.sector, states)
        if report is not None and poly is not None:
            flags = membership_X(certificate, report, system, poly, states)
    return Trajectory(times, states, etas, V, flags, scenario, bad is not None)


# ---------------------------------------------------------------------------
# Monte Carlo

@dataclass(frozen=True)
class MonteCarloConfig:
    trials: int = 100
    seed: int = 0
    horizon: float = 50.0
    step: float = 1e-3
    disturbance: str = "zero"
    magnitude: float = 0.0
    switch_period: float = 0.05
    norm: str = "euclidean"
    shell: tuple[float, float] | None = (0.9, 1.0)


@dataclass(frozen=True, eq=False)
class MonteCarloSummary:
    config: MonteCarloConfig
    trials: int
    violations: int
    violating_trials: list[int]
    first_exit_times: dict[int, float]
    exit_reasons: dict[int, str]
    converged: int
    final_norms: np.ndarray
    final_V: np.ndarray
    max_V_ratio: np.ndarray
    seeds: list[int]
    initial_states: np.ndarray
    diverged: int = 0

    def to_dict(self) -> dict:
        return {
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.config.__dict__.items()},
            "trials": self.trials,
            "violations": self.violations,
            "violating_trials": self.violating_trials,
            "first_exit_times": {str(k): v for k, v in self.first_exit_times.items()},
            "exit_reasons": {str(k): v for k, v in self.exit_reasons.items()},
            "converged": self.converged,
            "diverged": self.diverged,
            "max_final_norm": float(np.max(self.final_norms)),
            "max_final_V": float(np.max(self.final_V)),
            "max_V_over_Vmax": float(np.max(self.max_V_ratio)),
            "seeds": self.seeds,
        }


def sampling_box(cert: CertificateParams, system: LureSystem, level: float) -> np.ndarray:
    """Axis-aligned bounding box (N x 2) of ``{V <= level}``."""
    N = system.state_dimension
    box = np.empty((N, 2))
    for i in range(N):
        e = np.zeros(N)
        e[i] = 1.0
        box[i] = (-sublevel_extent(cert, system, -e, level), sublevel_extent(cert, system, e, level))
    return box


def sample_initial_states(cert: CertificateParams, report: LevelSetReport, system: LureSystem,
                          poly: ConstraintPolytope, rngs: list[np.random.Generator],
                          shell: tuple[float, float] | None = (0.9, 1.0), box: np.ndarray | None = None,
                          chunk: int = 512, max_draws: int = 10_000_000) -> np.ndarray:
    """One state per generator by rejection from the bounding box of the level set.

    Accepts candidates inside the invariant set, restricted to
    ``V in [shell[0], shell[1]] * V_max`` when a shell is given.
    """
    if box is None:
        box = sampling_box(cert, system, report.V_max)
    lo, hi = box[:, 0], box[:, 1]
    out = np.empty((len(rngs), lo.size))
    for t, rng in enumerate(rngs):
        drawn = 0
        while True:
            cand = lo + (hi - lo) * rng.random((chunk, lo.size))
            ok = membership_X(cert, report, system, poly, cand)
            if shell is not None:
                V = evaluate_V(cert.lyapunov, system, cert.sector, cand)
                ok &= (V >= shell[0] * report.V_max) & (V <= shell[1] * report.V_max)
            idx = np.flatnonzero(ok)
            if idx.size:
                out[t] = cand[idx[0]]
                break
            drawn += chunk
            if drawn > max_draws:
                raise RuntimeError("rejection sampler found no admissible state")
    return out


def monte_carlo_invariance(net: PowerNetwork, eq: EquilibriumState, cert: CertificateParams,
                           report: LevelSetReport, system: LureSystem, poly: ConstraintPolytope,
                           config: MonteCarloConfig) -> MonteCarloSummary:
    """Simulate trials from the invariant set and count exits from it.

    An exit is any sample with ``V > V_max``, a line angle beyond its limit or
    a frequency beyond its limit (all with a relative slack of ``EXIT_RTOL``).
    """
    seeds = [_child_seed(config.seed, i) for i in range(config.trials)]
    rngs = [np.random.default_rng([s, 0]) for s in seeds]
    x0 = sample_initial_states(cert, report, system, poly, rngs, config.shell)
    signals = [DisturbanceSignal(config.disturbance, config.magnitude, config.switch_period, s, config.norm)
               for s in seeds]
    n = eq.angles.size
    dist = _DisturbanceBatch(signals, n, config.step, cert.P @ system.H)
    field_ = SwingField(net, eq)
    steps = int(round(config.horizon / config.step))

    T = config.trials
    first_exit = np.full(T, -1, dtype=int)
    reason = [""] * T
    max_ratio = evaluate_V(cert.lyapunov, system, cert.sector, x0) / report.V_max
    vmax = report.V_max * (1 + EXIT_RTOL)
    th_lim = poly.angle_limits * (1 + EXIT_RTOL)
    om_lim = poly.frequency_limits * (1 + EXIT_RTOL)
    C, ts = system.C, system.edge_angles

    def observe(k, x, eta):
        V = evaluate_V(cert.lyapunov, system, cert.sector, x)
        np.maximum(max_ratio, V / report.V_max, out=max_ratio)
        over_V = V > vmax
        over_th = np.any(np.abs(x @ C.T + ts) > th_lim, axis=1)
        over_om = np.any(np.abs(x[:, n:]) > om_lim, axis=1)
        new = (over_V | over_th | over_om) & (first_exit < 0)
        for t in np.flatnonzero(new):
            first_exit[t] = k
            reason[t] = "angle limit" if over_th[t] else ("frequency limit" if over_om[t] else "V above V_max")

    xT, bad = _rk4(field_, x0, dist, config.step, steps, observe)
    diverged = 0
    if bad is not None:
        finite = np.all(np.isfinite(xT), axis=1)
        diverged = int(np.sum(~finite))
        first_exit[(~finite) & (first_exit < 0)] = bad
    final_norms = np.linalg.norm(np.nan_to_num(xT, nan=np.inf), axis=1)
    final_V = evaluate_V(cert.lyapunov, system, cert.sector, np.nan_to_num(xT, nan=0.0))
    viol = [int(t) for t in np.flatnonzero(first_exit >= 0)]
    return MonteCarloSummary(
        config, T, len(viol), viol,
        {t: float(first_exit[t] * config.step) for t in viol},
        {t: reason[t] or "diverged" for t in viol},
        int(np.sum(final_norms <= CONVERGENCE_RADIUS)),
        final_norms, final_V, max_ratio, seeds, x0, diverged,
    )


# ---------------------------------------------------------------------------
# figure data

@dataclass(frozen=True, eq=False)
class PhasePortrait:
    theta: np.ndarray
    omega: np.ndarray
    d_theta: np.ndarray
    d_omega: np.ndarray
    contour_Vmax: np.ndarray
    contour_Vhat: np.ndarray
    boundary_segments: list[dict]
    crossings: list[dict]
    V_max: float
    Vhat_max: float
    theta_max: float
    omega_max: float

    def write_csvs(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        field_path = out / "phase_field.csv"
        rows = np.column_stack([self.theta.ravel(), self.omega.ravel(), self.d_theta.ravel(), self.d_omega.ravel()])
        np.savetxt(field_path, rows, delimiter=",", header="theta,omega,dtheta,domega", comments="", fmt="%.10g")
        paths.append(field_path)
        for name, pts in (("contour_Vmax.csv", self.contour_Vmax), ("contour_Vhat.csv", self.contour_Vhat)):
            np.savetxt(out / name, pts, delimiter=",", header="theta,omega", comments="", fmt="%.12g")
            paths.append(out / name)
        seg_path = out / "boundary_segments.csv"
        with open(seg_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta", "omega_from", "omega_to", "outflow"])
            for s in self.boundary_segments:
                w.writerow([f"{s['theta']:.12g}", f"{s['omega_from']:.12g}", f"{s['omega_to']:.12g}", int(s["outflow"])])
        paths.append(seg_path)
        return paths


def _radial_contour(V: Callable[[np.ndarray], float], level: float, n_points: int, scale: np.ndarray) -> np.ndarray:
    """Points of ``{V = level}`` along rays from the origin (valid for convex V with V(0) = 0)."""
    pts = np.empty((n_points, 2))
    for k, a in enumerate(np.linspace(0.0, 2 * math.pi, n_points, endpoint=False)):
        u = np.array([math.cos(a), math.sin(a)]) * scale
        hi = 1.0
        while V(hi * u) < level:
            hi *= 2.0
        r = brentq(lambda s: V(s * u) - level, 0.0, hi, xtol=1e-14)
        pts[k] = r * u
    return pts


def phase_portrait(net: PowerNetwork, eq: EquilibriumState, cert: CertificateParams, report: LevelSetReport,
                   system: LureSystem, poly: ConstraintPolytope,
                   theta_range: tuple[float, float] = (-math.pi, math.pi),
                   omega_range: tuple[float, float] = (-4.0, 4.0),
                   grid: tuple[int, int] = (41, 41), contour_points: int = 720) -> PhasePortrait:
    """Vector field, level-set contours and boundary data for a single machine."""
    if system.state_dimension != 2:
        raise ValueError("phase portraits need a single-machine system (state dimension 2)")
    ts = float(eq.angles[0])
    field_ = SwingField(net, eq)
    th, om = np.meshgrid(np.linspace(*theta_range, grid[0]), np.linspace(*omega_range, grid[1]))
    xs = np.stack([th.ravel() - ts, om.ravel()], axis=1)
    d = field_(xs)

    def V(x):
        return float(evaluate_V(cert.lyapunov, system, cert.sector, x))

    scale = np.array([1.0, 1.0])
    shift = np.array([ts, 0.0])
    c_max = _radial_contour(V, report.V_max, contour_points, scale) + shift
    c_hat = _radial_contour(V, report.Vhat_max, contour_points, scale) + shift

    # the SMIB edge angle is theta_1 - theta_ref, possibly with the sign flipped by orientation
    sgn = float(system.C[0, 0])
    th_bar = float(poly.angle_limits[0])
    w_bar = float(poly.frequency_limits[0])
    segments, crossings = [], []
    for edge_theta in (-th_bar, th_bar):
        theta_abs = sgn * edge_theta  # machine angle on this face
        for w0, w1 in ((-w_bar, 0.0), (0.0, w_bar)):
            mid = (w0 + w1) / 2
            segments.append({"theta": theta_abs, "omega_from": w0, "omega_to": w1,
                             "outflow": bool(theta_abs * mid > 0)})
        z = theta_abs - ts
        line = lambda w: V(np.array([z, w])) - report.V_max  # noqa: E731
        wgrid = np.linspace(-4 * w_bar, 4 * w_bar, 2001)
        vals = np.array([line(w) for w in wgrid])
        k0 = int(np.argmin(vals))
        if vals[k0] > 0:
            continue
        for side in (slice(None, k0 + 1), slice(k0, None)):
            ws, vs = wgrid[side], vals[side]
            idx = np.flatnonzero(np.sign(vs[:-1]) != np.sign(vs[1:]))
            for i in idx:
                w = brentq(line, ws[i], ws[i + 1], xtol=1e-14)
                if any(c["theta"] == theta_abs and abs(c["omega"] - w) < 1e-9 for c in crossings):
                    continue
                # theta * omega <= 0 is the part of the face that trajectories cannot leave through
                crossings.append({"theta": theta_abs, "omega": w, "flow_sign": theta_abs * w,
                                  "escape_blocking": bool(theta_abs * w <= 1e-9)})
    return PhasePortrait(th, om, d[:, 0].reshape(th.shape), d[:, 1].reshape(th.shape), c_max, c_hat,
                         segments, crossings, report.V_max, report.Vhat_max, th_bar, w_bar)


@dataclass(frozen=True, eq=False)
class FrequencyTraces:
    times: np.ndarray
    omegas: np.ndarray
    machine_ids: list[int]

    def to_csv(self, path: str | Path) -> None:
        header = "t," + ",".join(f"omega_{i}" for i in self.machine_ids)
        np.savetxt(path, np.column_stack([self.times, self.omegas]), delimiter=",", header=header,
                   comments="", fmt="%.10g")


def frequency_traces(net: PowerNetwork, eq: EquilibriumState, cert: CertificateParams, report: LevelSetReport,
                     system: LureSystem, poly: ConstraintPolytope, x_f: np.ndarray,
                     step: float = 1e-3, horizon: float = 10.0) -> FrequencyTraces:
    x_f = np.asarray(x_f, dtype=float)
    if not membership_X(cert, report, system, poly, x_f):
        raise ValueError("fault-cleared state is not inside the certified invariant set")
    traj = integrate(net, eq, ScenarioSpec(x_f, step=step, horizon=horizon))
    n = eq.angles.size
    return FrequencyTraces(traj.times, traj.states[:, n:], list(net.node_ids))
