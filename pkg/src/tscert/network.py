"""Case ingestion, Kron reduction and post-fault equilibrium.

Angles are kept in raw (unshifted) form here; everything downstream works in
coordinates shifted to the equilibrium.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.sparse import csgraph

log = logging.getLogger(__name__)

EQUILIBRIUM_TOL = 1e-10
NEWTON_MAX_ITER = 100


class CaseError(ValueError):
    """Invalid case document or network; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ConvergenceError(RuntimeError):
    pass


class BusKind(str, enum.Enum):
    MACHINE = "machine"
    INFINITE_BUS = "infinite_bus"
    INTERIOR = "interior"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    V: float
    G: float = 0.0
    P: float = 0.0
    M: float | None = None
    D: float | None = None

    @property
    def net_injection(self) -> float:
        # shunt conductance load folded into the injection (lossless model)
        return self.P - self.G * self.V**2


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    B: float


@dataclass(frozen=True, eq=False)
class PowerNetwork:
    """Validated network with deterministic ordering.

    Buses are sorted by id; lines by ``(min id, max id)`` and oriented from the
    smaller to the larger id.  The reference (infinite) bus is a grounded node:
    it has no row in :attr:`incidence` but its incident edges are kept.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    redistribute_interior: bool = False
    notes: str = ""
    _index: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {b.id: k for k, b in enumerate(self.buses)})

    def _key(self):
        return self.buses, self.lines, self.redistribute_interior, self.notes

    def __eq__(self, other):
        if not isinstance(other, PowerNetwork):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    # -- structure ----------------------------------------------------------
    @property
    def reference(self) -> Bus:
        return next(b for b in self.buses if b.kind is BusKind.INFINITE_BUS)

    @property
    def node_ids(self) -> list[int]:
        """Ids of the non-reference buses, i.e. rows of :attr:`incidence`."""
        return [b.id for b in self.buses if b.kind is not BusKind.INFINITE_BUS]

    @property
    def machine_ids(self) -> list[int]:
        return [b.id for b in self.buses if b.kind is BusKind.MACHINE]

    @property
    def is_reduced(self) -> bool:
        return all(b.kind is not BusKind.INTERIOR for b in self.buses)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(ln.from_bus, ln.to_bus) for ln in self.lines]

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self._index[bus_id]]

    @cached_property
    def full_incidence(self) -> np.ndarray:
        """All-bus incidence (buses x edges), +1 at ``from``, -1 at ``to``."""
        E = np.zeros((len(self.buses), len(self.lines)))
        for k, ln in enumerate(self.lines):
            E[self._index[ln.from_bus], k] = 1.0
            E[self._index[ln.to_bus], k] = -1.0
        return _frozen(E)

    @cached_property
    def incidence(self) -> np.ndarray:
        """Incidence restricted to non-reference buses (the matrix ``E``)."""
        rows = [self._index[i] for i in self.node_ids]
        return _frozen(self.full_incidence[rows])

    @cached_property
    def edge_weights(self) -> np.ndarray:
        """``y_ij = B_ij V_i V_j`` per edge (diagonal of ``Y``)."""
        return _frozen(np.array([ln.B * self.bus(ln.from_bus).V * self.bus(ln.to_bus).V for ln in self.lines]))

    @cached_property
    def inertia(self) -> np.ndarray:
        return _frozen(np.array([self.bus(i).M for i in self.node_ids], dtype=float))

    @cached_property
    def damping(self) -> np.ndarray:
        return _frozen(np.array([self.bus(i).D for i in self.node_ids], dtype=float))

    @cached_property
    def injection(self) -> np.ndarray:
        return _frozen(np.array([self.bus(i).net_injection for i in self.node_ids]))

    def susceptance_laplacian(self) -> np.ndarray:
        """Laplacian of the line susceptances over all buses (bus order)."""
        Ef = self.full_incidence
        return Ef @ np.diag([ln.B for ln in self.lines]) @ Ef.T

    def edge_angles(self, node_angles: np.ndarray) -> np.ndarray:
        """Angle differences ``theta_i - theta_j`` per edge; the reference angle is 0."""
        return np.asarray(node_angles, dtype=float) @ self.incidence

    def full_angles(self, node_angles: np.ndarray, reference_angle: float = 0.0) -> np.ndarray:
        """Angles of every bus in bus order, with the reference bus set explicitly."""
        node_angles = np.asarray(node_angles, dtype=float)
        full = np.empty(node_angles.shape[:-1] + (len(self.buses),))
        full[..., [self._index[i] for i in self.node_ids]] = node_angles
        full[..., self._index[self.reference.id]] = reference_angle
        return full

    # -- io -----------------------------------------------------------------
    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"buses": [], "lines": []}
        for b in self.buses:
            entry: dict[str, Any] = {"id": b.id, "kind": b.kind.value, "V": b.V, "G": b.G, "P": b.P}
            if b.kind is BusKind.MACHINE:
                entry["M"] = b.M
                entry["D"] = b.D
            doc["buses"].append(entry)
        doc["lines"] = [{"from": ln.from_bus, "to": ln.to_bus, "B": ln.B} for ln in self.lines]
        if self.redistribute_interior:
            doc["options"] = {"redistribute_interior_injections": True}
        if self.notes:
            doc["notes"] = self.notes
        return doc


@dataclass(frozen=True)
class EquilibriumState:
    angles: np.ndarray
    reference_angle: float
    edge_angles: np.ndarray
    residual_norm: float
    iterations: int

    @property
    def max_angle_difference(self) -> float:
        return float(np.max(np.abs(self.edge_angles))) if self.edge_angles.size else 0.0

    @property
    def flagged(self) -> bool:
        """True when some line angle reaches pi/2; certification refuses these."""
        return self.max_angle_difference >= math.pi / 2


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# parsing

def _number(value: Any, path: str, *, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseError(path, f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise CaseError(path, "must be finite")
    if positive and value <= 0:
        raise CaseError(path, f"must be positive, got {value}")
    return value


def parse_case(source: str | Path | Mapping[str, Any]) -> PowerNetwork:
    """Build a validated :class:`PowerNetwork` from a case document.

    ``source`` may be a mapping, a JSON string, or a path to a JSON file.
    """
    if isinstance(source, Mapping):
        doc = source
    else:
        text = str(source)
        if isinstance(source, Path) or not text.lstrip().startswith("{"):
            text = Path(source).read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseError("$", f"not valid JSON ({exc})") from None
    if not isinstance(doc, Mapping):
        raise CaseError("$", "case document must be an object")
    for key in ("buses", "lines"):
        if not isinstance(doc.get(key), list):
            raise CaseError(key, "missing or not a list")

    buses: dict[int, Bus] = {}
    for k, raw in enumerate(doc["buses"]):
        path = f"buses[{k}]"
        if not isinstance(raw, Mapping):
            raise CaseError(path, "must be an object")
        bid = raw.get("id")
        if isinstance(bid, bool) or not isinstance(bid, int):
            raise CaseError(f"{path}.id", f"expected an integer, got {bid!r}")
        if bid in buses:
            raise CaseError(f"{path}.id", f"duplicate bus id {bid}")
        try:
            kind = BusKind(raw.get("kind"))
        except ValueError:
            raise CaseError(f"{path}.kind", f"unknown kind {raw.get('kind')!r}") from None
        V = _number(raw.get("V"), f"{path}.V", positive=True)
        G = _number(raw.get("G", 0.0), f"{path}.G")
        P = _number(raw.get("P", 0.0), f"{path}.P")
        M = D = None
        if kind is BusKind.MACHINE:
            M = _number(raw.get("M"), f"{path}.M", positive=True)
            D = _number(raw.get("D"), f"{path}.D", positive=True)
        buses[bid] = Bus(bid, kind, V, G, P, M, D)

    refs = [b for b in buses.values() if b.kind is BusKind.INFINITE_BUS]
    if len(refs) != 1:
        raise CaseError("buses", f"exactly one infinite_bus required, found {len(refs)}")
    if not any(b.kind is BusKind.MACHINE for b in buses.values()):
        raise CaseError("buses", "at least one machine bus required")

    lines: dict[tuple[int, int], Line] = {}
    for k, raw in enumerate(doc["lines"]):
        path = f"lines[{k}]"
        if not isinstance(raw, Mapping):
            raise CaseError(path, "must be an object")
        ends = []
        for key in ("from", "to"):
            v = raw.get(key)
            if isinstance(v, bool) or not isinstance(v, int) or v not in buses:
                raise CaseError(f"{path}.{key}", f"unknown bus {v!r}")
            ends.append(v)
        if ends[0] == ends[1]:
            raise CaseError(path, "self loop")
        pair = (min(ends), max(ends))
        if pair in lines:
            raise CaseError(path, f"duplicate line between buses {pair[0]} and {pair[1]}")
        lines[pair] = Line(pair[0], pair[1], _number(raw.get("B"), f"{path}.B", positive=True))

    options = doc.get("options", {}) or {}
    if not isinstance(options, Mapping):
        raise CaseError("options", "must be an object")
    net = PowerNetwork(
        buses=tuple(buses[i] for i in sorted(buses)),
        lines=tuple(lines[p] for p in sorted(lines)),
        redistribute_interior=bool(options.get("redistribute_interior_injections", False)),
        notes=str(doc.get("notes", "")),
    )
    _check_connected(net)
    return net


def serialize_case(net: PowerNetwork) -> str:
    return json.dumps(net.to_document(), indent=2)


def _check_connected(net: PowerNetwork) -> None:
    adj = np.abs(net.susceptance_laplacian()) > 0
    ncomp, _ = csgraph.connected_components(adj, directed=False)
    if ncomp != 1:
        raise CaseError("lines", f"network graph is disconnected ({ncomp} components)")


def bundled_case(name: str) -> Path:
    """Path of a case shipped with the package (``smib`` or ``ieee9_kron``)."""
    path = Path(__file__).parent / "data" / f"{name}.case"
    if not path.exists():
        raise FileNotFoundError(f"no bundled case {name!r}")
    return path


# ---------------------------------------------------------------------------
# Kron reduction

def kron_reduce(net: PowerNetwork, redistribute: bool | None = None) -> PowerNetwork:
    """Eliminate interior buses by a Schur complement of the susceptance Laplacian.

    Interior buses must carry zero net injection unless ``redistribute`` (which
    defaults to the case option) is set; then each interior injection is shared
    among retained buses in proportion to the inverse effective reactance
    between them.
    """
    if redistribute is None:
        redistribute = net.redistribute_interior
    kept = [k for k, b in enumerate(net.buses) if b.kind is not BusKind.INTERIOR]
    elim = [k for k, b in enumerate(net.buses) if b.kind is BusKind.INTERIOR]
    if not elim:
        return net

    L = net.susceptance_laplacian()
    Lii = L[np.ix_(elim, elim)]
    try:
        solve = np.linalg.solve(Lii, L[np.ix_(elim, kept)])
    except np.linalg.LinAlgError:
        raise CaseError("lines", "interior susceptance block is singular") from None
    Lred = L[np.ix_(kept, kept)] - L[np.ix_(kept, elim)] @ solve

    extra = np.zeros(len(kept))
    interior_p = np.array([net.buses[k].net_injection for k in elim])
    if np.any(np.abs(interior_p) > 0):
        if not redistribute:
            bad = [net.buses[k].id for k, p in zip(elim, interior_p) if p != 0]
            raise CaseError("buses", f"interior buses {bad} carry nonzero injection; enable redistribution")
        Lpinv = np.linalg.pinv(L)
        diag = np.diag(Lpinv)
        for k, p in zip(elim, interior_p):
            reff = diag[k] + diag[kept] - 2 * Lpinv[k, kept]
            w = 1.0 / reff
            extra += p * w / w.sum()

    scale = max(1.0, float(np.max(np.abs(Lred))))
    lines = []
    for a in range(len(kept)):
        for b in range(a + 1, len(kept)):
            weight = -Lred[a, b]
            if weight > 1e-12 * scale:
                lines.append(Line(net.buses[kept[a]].id, net.buses[kept[b]].id, float(weight)))
            elif weight < -1e-12 * scale:
                raise CaseError("lines", "reduced network has a negative susceptance")
    buses = []
    for a, k in enumerate(kept):
        b = net.buses[k]
        # G is folded into P so the reduced bus carries the net injection
        buses.append(Bus(b.id, b.kind, b.V, 0.0, b.net_injection + float(extra[a]), b.M, b.D))
    reduced = PowerNetwork(tuple(buses), tuple(lines), False, net.notes)
    _check_connected(reduced)
    return reduced


# ---------------------------------------------------------------------------
# equilibrium

def power_residual(net: PowerNetwork, angles: np.ndarray) -> np.ndarray:
    """``P - E Y sin(E^T theta)`` at non-reference angles ``angles``."""
    E, y = net.incidence, net.edge_weights
    return net.injection - E @ (y * np.sin(net.edge_angles(angles)))


def power_residual_full(net: PowerNetwork, full_angles: np.ndarray) -> np.ndarray:
    """Same residual from the angles of all buses, reference included."""
    rows = [net._index[i] for i in net.node_ids]
    flows = net.full_incidence @ (net.edge_weights * np.sin(net.full_incidence.T @ full_angles))
    return net.injection - flows[rows]


def _newton_direction(net: PowerNetwork, theta: np.ndarray, res: np.ndarray) -> np.ndarray:
    E, y = net.incidence, net.edge_weights
    J = -E @ np.diag(y * np.cos(net.edge_angles(theta))) @ E.T
    try:
        return np.linalg.solve(J, -res)
    except np.linalg.LinAlgError:
        raise ConvergenceError("singular power-flow Jacobian") from None


def solve_equilibrium(
    net: PowerNetwork, tol: float = EQUILIBRIUM_TOL, max_iter: int = NEWTON_MAX_ITER
) -> EquilibriumState:
    """Damped Newton from flat start with step halving on residual increase.

    Two extra full steps are taken after reaching ``tol`` so the returned
    angles sit at machine precision.
    """
    if not net.is_reduced:
        raise CaseError("buses", "equilibrium requires a reduced network (no interior buses)")
    theta = np.zeros(len(net.node_ids))
    res = power_residual(net, theta)
    norm = float(np.max(np.abs(res), initial=0.0))
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise ConvergenceError(f"Newton did not converge: residual {norm:.3e} after {it} iterations")
        step = _newton_direction(net, theta, res)
        t = 1.0
        while True:
            trial = theta + t * step
            trial_res = power_residual(net, trial)
            trial_norm = float(np.max(np.abs(trial_res)))
            if trial_norm < norm or t < 1e-8:
                break
            t *= 0.5
        theta, res, norm = trial, trial_res, trial_norm
        it += 1
    for _ in range(2):
        if norm == 0.0:
            break
        trial = theta + _newton_direction(net, theta, res)
        trial_res = power_residual(net, trial)
        trial_norm = float(np.max(np.abs(trial_res)))
        if trial_norm >= norm:
            break
        theta, res, norm = trial, trial_res, trial_norm
    eq = EquilibriumState(theta, 0.0, net.edge_angles(theta), norm, it)
    if eq.flagged:
        log.warning("equilibrium has a line angle of %.3f rad >= pi/2", eq.max_angle_difference)
    return eq
