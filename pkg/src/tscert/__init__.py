"""Lyapunov certificates of transient stability under angle and frequency limits."""
from .network import (
    BusKind,
    CaseError,
    ConvergenceError,
    EquilibriumState,
    PowerNetwork,
    bundled_case,
    kron_reduce,
    parse_case,
    serialize_case,
    solve_equilibrium,
)
from .lure import ConstraintPolytope, LureSystem, SectorBounds, build_lure, sector_bounds
from .certificate import CertificateParams, CertificateSearchError, find_certificate
from .levelset import LevelSetReport, compute_level_sets, membership_X
from .robustness import RobustnessReport, compute_eta_bar

__version__ = "0.1.0"
