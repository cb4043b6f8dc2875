"""Command-line pipeline: certify a case, simulate against the certificate, emit figure data."""
from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .certificate import (
    BUDGET,
    EPS_GAMMA,
    EPS_P,
    EPS_R,
    CertificateParams,
    CertificateSearchError,
    certificate_from_dict,
    find_certificate,
)
from .levelset import FaceSolveError, LevelSetReport, compute_level_sets, membership_X
from .lure import ConstraintPolytope, LureSystem, SectorBounds, build_lure, sector_bounds
from .network import (
    EQUILIBRIUM_TOL,
    CaseError,
    ConvergenceError,
    EquilibriumState,
    PowerNetwork,
    bundled_case,
    kron_reduce,
    parse_case,
    solve_equilibrium,
)
from .robustness import RobustnessError, RobustnessReport, compute_eta_bar
from .sim import (
    DisturbanceSignal,
    MonteCarloConfig,
    ScenarioSpec,
    frequency_traces,
    integrate,
    monte_carlo_invariance,
    phase_portrait,
    sample_initial_states,
)

log = logging.getLogger("tscert")

REPORT_FORMAT = "tscert-report/1"
EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2

DISTURBANCES = {
    "zero": "zero",
    "at-bound": "piecewise_constant_random",
    "constant": "constant_direction",
    "adversarial": "adversarial_aligned",
}


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception, exit_code: int):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code


_INPUT_ERRORS = (CaseError, ConvergenceError, ValueError, FileNotFoundError, KeyError)
_SEARCH_ERRORS = (CertificateSearchError, FaceSolveError, RobustnessError)


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except _SEARCH_ERRORS as exc:
        raise StageError(name, exc, EXIT_INFEASIBLE) from exc
    except _INPUT_ERRORS as exc:
        raise StageError(name, exc, EXIT_INPUT) from exc


_NUMBER = r"[0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?"
_ANGLE = re.compile(rf"^\s*(?P<sign>[+-])?\s*(?P<num>{_NUMBER})?\s*\*?\s*(?P<pi>pi)?\s*(?:/\s*(?P<den>{_NUMBER}))?\s*$")


def parse_value(text: str) -> float:
    """A number, optionally written as a multiple of pi: ``0.5``, ``pi``, ``3pi/4``, ``3*pi/4``."""
    m = _ANGLE.match(text)
    if not m or (m["num"] is None and m["pi"] is None):
        raise ValueError(f"cannot parse {text!r} as a number")
    value = float(m["num"]) if m["num"] is not None else 1.0
    if m["pi"]:
        value *= math.pi
    if m["den"] is not None:
        value /= float(m["den"])
    return -value if m["sign"] == "-" else value


def parse_values(text: str) -> list[float]:
    return [parse_value(t) for t in text.split(",")]


def _broadcast(values: Sequence[float], size: int, name: str) -> np.ndarray:
    if len(values) == 1:
        return np.full(size, float(values[0]))
    if len(values) != size:
        raise CaseError(name, f"expected 1 or {size} values, got {len(values)}")
    return np.asarray(values, dtype=float)


def resolve_case(case: str) -> Path:
    """A bundled case name or a file path."""
    path = Path(case)
    if path.exists():
        return path
    try:
        return bundled_case(case)
    except FileNotFoundError:
        raise FileNotFoundError(f"case {case!r} is neither a file nor a bundled case") from None


@dataclass(frozen=True)
class RunConfig:
    case: str
    theta_max: tuple[float, ...] = (math.pi / 2,)
    omega_max: tuple[float, ...] = (math.pi,)
    eps_P: float = EPS_P
    eps_gamma: float = EPS_GAMMA
    eps_R: float = EPS_R
    equilibrium_tol: float = EQUILIBRIUM_TOL
    budget: int = BUDGET

    def __post_init__(self):
        for name in ("eps_P", "eps_gamma", "eps_R", "equilibrium_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.budget <= 0:
            raise ValueError("budget must be positive")


@dataclass(frozen=True, eq=False)
class Certification:
    """Every artifact of one certification run."""

    config: RunConfig
    case_document: dict[str, Any]
    network: PowerNetwork
    reduced: PowerNetwork
    equilibrium: EquilibriumState
    system: LureSystem
    polytope: ConstraintPolytope
    sector: SectorBounds
    certificate: CertificateParams
    levels: LevelSetReport
    robustness: RobustnessReport

    @property
    def edge_labels(self) -> list[str]:
        return [f"{i}-{j}" for i, j in self.reduced.edges]

    def to_document(self) -> dict[str, Any]:
        red, eq, s = self.reduced, self.equilibrium, self.system
        return {
            "format": REPORT_FORMAT,
            "case": self.case_document,
            "settings": {
                "theta_max": self.polytope.angle_limits.tolist(),
                "omega_max": self.polytope.frequency_limits.tolist(),
                "eps_P": self.config.eps_P,
                "eps_gamma": self.config.eps_gamma,
                "eps_R": self.config.eps_R,
                "equilibrium_tol": self.config.equilibrium_tol,
                "budget": self.config.budget,
            },
            "reduced_network": {
                "machines": red.node_ids,
                "reference_bus": red.reference.id,
                "edges": self.edge_labels,
                "edge_weights": red.edge_weights.tolist(),
                "inertia": red.inertia.tolist(),
                "damping": red.damping.tolist(),
                "injection": red.injection.tolist(),
            },
            "equilibrium": {
                "angles": eq.angles.tolist(),
                "reference_angle": eq.reference_angle,
                "edge_angles": eq.edge_angles.tolist(),
                "residual_norm": eq.residual_norm,
                "iterations": eq.iterations,
            },
            "lure": {k: getattr(s, k).tolist() for k in ("A", "B", "C", "H")},
            "sector": self.sector.to_dict(),
            "certificate": self.certificate.to_dict(),
            "level_sets": self.levels.to_dict(),
            "robustness": self.robustness.to_dict(),
            "summary": {
                "V_max": self.levels.V_max,
                "Vhat_max": self.levels.Vhat_max,
                "eta_bar": self.robustness.eta_bar,
                "margin": self.certificate.margin,
            },
        }


def _front_end(case_document: dict[str, Any], theta_max, omega_max, tol: float):
    with stage("parse"):
        net = parse_case(case_document)
    with stage("kron_reduce"):
        red = kron_reduce(net)
    with stage("solve_equilibrium"):
        eq = solve_equilibrium(red, tol=tol)
        if eq.flagged:
            raise CaseError("equilibrium", f"line angle {eq.max_angle_difference:.4f} rad is not below pi/2")
    with stage("build_lure"):
        system = build_lure(red, eq)
        poly = ConstraintPolytope(_broadcast(theta_max, system.edge_count, "theta_max"),
                                  _broadcast(omega_max, system.n, "omega_max"))
    with stage("sector_bounds"):
        sector = sector_bounds(eq, poly)
    return net, red, eq, system, poly, sector


def _back_end(cert: CertificateParams, system: LureSystem, poly: ConstraintPolytope, labels: list[str]):
    with stage("compute_level_sets"):
        levels = compute_level_sets(cert, system, poly, labels)
    with stage("compute_eta_bar"):
        robust = compute_eta_bar(cert, system, levels)
    return levels, robust


def certify(config: RunConfig) -> Certification:
    with stage("parse"):
        path = resolve_case(config.case)
        try:
            document = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CaseError("$", f"not valid JSON ({exc.msg} at line {exc.lineno})") from exc
        if not isinstance(document, dict):
            raise CaseError("$", "case document must be an object")
    net, red, eq, system, poly, sector = _front_end(document, config.theta_max, config.omega_max,
                                                   config.equilibrium_tol)
    with stage("find_certificate"):
        cert = find_certificate(system, sector, eps_P=config.eps_P, eps_gamma=config.eps_gamma,
                                eps_R=config.eps_R, budget=config.budget)
    labels = [f"{i}-{j}" for i, j in red.edges]
    levels, robust = _back_end(cert, system, poly, labels)
    return Certification(config, net.to_document(), net, red, eq, system, poly, sector, cert, levels, robust)


def load_certification(document: dict[str, Any]) -> Certification:
    """Rebuild a run from its report; level sets and the budget are recomputed from the stored certificate."""
    with stage("report"):
        if document.get("format") != REPORT_FORMAT:
            raise ValueError(f"not a {REPORT_FORMAT} document")
        st = document["settings"]
    net, red, eq, system, poly, sector = _front_end(document["case"], st["theta_max"], st["omega_max"],
                                                   st["equilibrium_tol"])
    with stage("certificate"):
        cert = certificate_from_dict(document["certificate"], system)
        if cert.assembly.max_eig_R > -st["eps_R"]:
            raise CertificateSearchError(f"stored certificate no longer verifies (lambda_max(R) = "
                                         f"{cert.assembly.max_eig_R:.3e})")
    labels = [f"{i}-{j}" for i, j in red.edges]
    levels, robust = _back_end(cert, system, poly, labels)
    config = RunConfig("<report>", tuple(st["theta_max"]), tuple(st["omega_max"]), st["eps_P"], st["eps_gamma"],
                       st["eps_R"], st["equilibrium_tol"], st["budget"])
    return Certification(config, document["case"], net, red, eq, system, poly, sector, cert, levels, robust)


def dump_json(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def _config_from_args(args) -> RunConfig:
    return RunConfig(args.case, tuple(parse_values(args.theta_max)), tuple(parse_values(args.omega_max)),
                     args.eps_p, args.eps_gamma, args.eps_r, args.equilibrium_tol, args.budget)


def _obtain(args) -> Certification:
    if args.report:
        with stage("report"):
            document = json.loads(Path(args.report).read_text())
        return load_certification(document)
    if not args.case:
        raise StageError("arguments", ValueError("either --report or --case is required"), EXIT_INPUT)
    with stage("arguments"):
        config = _config_from_args(args)
    return certify(config)


def cmd_certify(args) -> int:
    with stage("arguments"):
        config = _config_from_args(args)
    run = certify(config)
    out = Path(args.out)
    dump_json(run.to_document(), out / "report.json")
    print(_summary_text(run.to_document()))
    print(f"report written to {out / 'report.json'}")
    return EXIT_OK


def _parse_state(text: str, size: int) -> np.ndarray:
    values = parse_values(text)
    if len(values) == 1 and values[0] == 0.0:
        return np.zeros(size)
    if len(values) != size:
        raise ValueError(f"--x0 needs {size} values (shifted angles then frequencies), got {len(values)}")
    return np.asarray(values)


def cmd_simulate(args) -> int:
    run = _obtain(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eta_bar = run.robustness.eta_bar
    kind = DISTURBANCES[args.disturbance]
    magnitude = 0.0 if kind == "zero" else args.eta_scale * eta_bar
    N = run.system.state_dimension
    wrote = False

    if args.x0 is not None:
        with stage("integrate"):
            x0 = _parse_state(args.x0, N)
            if not membership_X(run.certificate, run.levels, run.system, run.polytope, x0):
                raise ValueError("initial state is outside the certified invariant set")
            signal = DisturbanceSignal(kind, magnitude, args.switch_period, args.seed)
            traj = integrate(run.reduced, run.equilibrium, ScenarioSpec(x0, signal, args.step, args.horizon),
                             run.certificate, run.system, run.levels, run.polytope)
            traj.to_csv(out / "trajectory.csv", run.equilibrium)
        print(f"trajectory: {traj.times.size} samples, final |x| = {np.linalg.norm(traj.states[-1]):.3e}, "
              f"all in X: {bool(np.all(traj.membership_flags))}")
        wrote = True

    if args.trials:
        with stage("monte_carlo_invariance"):
            shell = None if args.no_shell else tuple(parse_values(args.shell))
            cfg = MonteCarloConfig(args.trials, args.seed, args.horizon, args.step, kind, magnitude,
                                   args.switch_period, "euclidean", shell)
            summary = monte_carlo_invariance(run.reduced, run.equilibrium, run.certificate, run.levels,
                                             run.system, run.polytope, cfg)
        doc = summary.to_dict()
        doc["eta_bar"] = eta_bar
        dump_json(doc, out / "monte_carlo.json")
        print(f"monte carlo: {summary.trials} trials, {summary.violations} exits from X, "
              f"{summary.converged} converged to |x(T)| <= 1e-3")
        wrote = True

    if args.frequency_traces:
        with stage("frequency_traces"):
            if args.x0 is not None:
                xf = _parse_state(args.x0, N)
            else:
                rng = [np.random.default_rng([args.seed, 0])]
                xf = sample_initial_states(run.certificate, run.levels, run.system, run.polytope, rng)[0]
            tr = frequency_traces(run.reduced, run.equilibrium, run.certificate, run.levels, run.system,
                                  run.polytope, xf, args.step, args.horizon)
            tr.to_csv(out / "frequency_traces.csv")
        peak = float(np.max(np.abs(tr.omegas)))
        print(f"frequency traces: max |omega| = {peak:.4f} rad/s (limit {run.polytope.frequency_limits.min():.4f})")
        wrote = True

    if args.phase_portrait:
        _write_portrait(run, out, args)
        wrote = True

    if not wrote:
        print("nothing to do: pass --x0, --trials, --frequency-traces or --phase-portrait", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def _write_portrait(run: Certification, out: Path, args) -> None:
    with stage("phase_portrait"):
        pp = phase_portrait(run.reduced, run.equilibrium, run.certificate, run.levels, run.system, run.polytope,
                            grid=(args.grid, args.grid))
        paths = pp.write_csvs(out)
        dump_json({"V_max": pp.V_max, "Vhat_max": pp.Vhat_max, "theta_max": pp.theta_max,
                   "omega_max": pp.omega_max, "boundary_segments": pp.boundary_segments,
                   "crossings": pp.crossings}, out / "phase_portrait.json")
    blocking = all(c["escape_blocking"] for c in pp.crossings)
    print(f"phase portrait: {len(paths)} CSV files, {len(pp.crossings)} contour/boundary crossings, "
          f"all on non-escape segments: {blocking}")


def cmd_phase_portrait(args) -> int:
    run = _obtain(args)
    _write_portrait(run, Path(args.out), args)
    return EXIT_OK


def _summary_text(doc: dict[str, Any]) -> str:
    red, lv, rb = doc["reduced_network"], doc["level_sets"], doc["robustness"]
    cert = doc["certificate"]
    lines = [
        f"machines {red['machines']} (reference bus {red['reference_bus']}), edges {red['edges']}",
        f"equilibrium angles {np.round(doc['equilibrium']['angles'], 6).tolist()}, "
        f"line angles {np.round(doc['equilibrium']['edge_angles'], 6).tolist()}",
        f"theta_max {np.round(doc['settings']['theta_max'], 6).tolist()}, "
        f"omega_max {np.round(doc['settings']['omega_max'], 6).tolist()}",
        f"sector lower {np.round(doc['sector']['lower'], 6).tolist()}, upper {np.round(doc['sector']['upper'], 6).tolist()}",
        f"certificate margin -lambda_max(R) = {cert['margin']:.6g} after {cert['search'].get('iterations')} iterations",
        f"lambda {np.round(cert['lambda'], 6).tolist()}, gamma {np.round(cert['gamma'], 6).tolist()}",
    ]
    for key in ("V_star", "W_star", "Vhat_star", "V_max", "Vhat_max"):
        lines.append(f"{key:9s} = {lv[key]:.8g}  ({lv['attained_by'][key]})")
    lines += [
        f"eta_bar   = {rb['eta_bar']:.6g}  [{rb['norm']}]",
        f"  sigma_min(-R) = {rb['sigma_min_negR']:.6g}, |PH| = {rb['PH_norm']:.6g}, psi2 = {rb['psi2']:.6g}, "
        f"mu = {rb['mu']:.6g}, |C| = {rb['C_norm']:.6g}",
    ]
    return "\n".join(lines)


def cmd_report(args) -> int:
    with stage("report"):
        doc = json.loads(Path(args.path).read_text())
        if doc.get("format") != REPORT_FORMAT:
            raise ValueError(f"{args.path} is not a {REPORT_FORMAT} document")
        text = _summary_text(doc)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_case_flags(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--case", required=required, help="bundled case name (smib, ieee9_kron) or path to a case file")
    p.add_argument("--theta-max", default="pi/2", help="line angle limit(s), e.g. 3pi/4 or a comma list per edge")
    p.add_argument("--omega-max", default="pi", help="frequency limit(s) in rad/s, one or per machine")
    p.add_argument("--eps-p", type=float, default=EPS_P)
    p.add_argument("--eps-gamma", type=float, default=EPS_GAMMA)
    p.add_argument("--eps-r", type=float, default=EPS_R)
    p.add_argument("--equilibrium-tol", type=float, default=EQUILIBRIUM_TOL)
    p.add_argument("--budget", type=int, default=BUDGET, help="certificate search iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tscert", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("certify", help="run the certification pipeline and write report.json")
    _add_case_flags(p, required=True)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_certify)

    for name, func, helptext in (("simulate", cmd_simulate, "simulate against a certificate"),
                                 ("phase-portrait", cmd_phase_portrait, "single-machine phase portrait CSVs")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--report", help="report.json from certify (otherwise certify --case first)")
        _add_case_flags(p, required=False)
        p.add_argument("--out", default="out")
        p.add_argument("--grid", type=int, default=41, help="vector field samples per axis")
        if name == "simulate":
            p.add_argument("--x0", help="initial shifted state (angles then frequencies), or 0")
            p.add_argument("--trials", type=int, default=0)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--step", type=float, default=1e-3)
            p.add_argument("--horizon", type=float, default=50.0)
            p.add_argument("--disturbance", choices=sorted(DISTURBANCES), default="zero")
            p.add_argument("--eta-scale", type=float, default=1 - 1e-6,
                           help="disturbance magnitude as a multiple of eta_bar")
            p.add_argument("--switch-period", type=float, default=0.05)
            p.add_argument("--shell", default="0.9,1.0", help="sample V in [a, b] * V_max")
            p.add_argument("--no-shell", action="store_true", help="sample the whole invariant set")
            p.add_argument("--frequency-traces", action="store_true")
            p.add_argument("--phase-portrait", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="pretty-print a stored report")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
