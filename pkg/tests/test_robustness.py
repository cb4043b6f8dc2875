import math

import numpy as np
import pytest

from conftest import make_certificate
from tscert.certificate import evaluate_V
from tscert.levelset import compute_level_sets, membership_X
from tscert.robustness import RobustnessError, compute_eta_bar, eta_bar_formula, liss_bound_check
from tscert.sim import DisturbanceSignal, ScenarioSpec, integrate, sample_initial_states


def test_formula_arithmetic():
    assert eta_bar_formula(1.0, 1.0, 1.0, 0.0, 1.0, 4.0) == pytest.approx(1.0, rel=1e-15)


def test_eta_bar_linear_in_sqrt_level():
    base = eta_bar_formula(0.3, 0.7, 1.2, 0.05, 1.7, 0.25)
    for k in (4.0, 9.0, 0.01):
        assert eta_bar_formula(0.3, 0.7, 1.2, 0.05, 1.7, 0.25 * k) == pytest.approx(base * math.sqrt(k), rel=1e-14)


def test_mu_vanishes_without_multipliers(smib_run):
    s, sec, poly = smib_run.system, smib_run.sector, smib_run.polytope
    cert = make_certificate(s, sec, np.eye(2), [0.0])
    assert np.any(sec.upper != sec.lower)
    levels = compute_level_sets(cert, s, poly)
    # identity P with lambda = 0 is not a certificate, but mu is defined regardless
    with pytest.raises(RobustnessError):
        compute_eta_bar(cert, s, levels)
    good = make_certificate(s, sec, smib_run.certificate.P, [0.0], smib_run.certificate.gamma)
    assert compute_eta_bar(good, s, compute_level_sets(good, s, poly)).mu == 0.0


def test_ieee9_budget_and_factors(ieee9_run):
    rb = ieee9_run.robustness
    assert 1e-4 <= rb.eta_bar <= 1e-1
    d = rb.to_dict()
    for key in ("sigma_min_negR", "PH_norm", "psi1", "psi2", "mu", "C_norm", "Vhat_max", "eta_bar", "norm"):
        assert key in d
    assert rb.psi1 > 0 and rb.psi2 >= rb.psi1


def test_recomputed_factors_agree(ieee9_run):
    cert, s, rb = ieee9_run.certificate, ieee9_run.system, ieee9_run.robustness
    sigma = np.linalg.svd(-cert.assembly.R, compute_uv=False)[-1]
    PH = np.linalg.svd(cert.P @ s.H, compute_uv=False)[0]
    sP = np.linalg.svd(cert.P, compute_uv=False)[0]
    Cn = np.linalg.svd(s.C, compute_uv=False)[0]
    mu = max(lam * (hi - lo) for lam, hi, lo in zip(cert.lam, cert.sector.upper, cert.sector.lower))
    eta = sigma / (2 * PH * math.sqrt(sP + mu * Cn**2)) * math.sqrt(ieee9_run.levels.Vhat_max)
    assert eta == pytest.approx(rb.eta_bar, rel=1e-12)


def _trajectory(run, x0, kind, magnitude, horizon=20.0, seed=0):
    sig = DisturbanceSignal(kind, magnitude, 0.05, seed)
    return integrate(run.reduced, run.equilibrium, ScenarioSpec(x0, sig, 1e-3, horizon),
                     run.certificate, run.system, run.levels, run.polytope)


def _check(run, traj):
    return liss_bound_check(run.certificate, run.system, run.robustness, run.levels, run.polytope,
                            traj.times, traj.states, traj.disturbances)


def test_undisturbed_trajectory_passes(smib_run):
    x0 = sample_initial_states(smib_run.certificate, smib_run.levels, smib_run.system, smib_run.polytope,
                               [np.random.default_rng(5)])[0]
    chk = _check(smib_run, _trajectory(smib_run, x0, "zero", 0.0))
    assert not chk.violated and chk.V_monotone


def test_half_budget_constant_disturbance(ieee9_run):
    rngs = [np.random.default_rng([9, i]) for i in range(5)]
    x0s = sample_initial_states(ieee9_run.certificate, ieee9_run.levels, ieee9_run.system, ieee9_run.polytope, rngs)
    for i, x0 in enumerate(x0s):
        traj = _trajectory(ieee9_run, x0, "constant_direction", ieee9_run.robustness.eta_bar / 2, seed=i)
        assert not _check(ieee9_run, traj).violated
        assert np.all(traj.membership_flags)


def test_large_adversarial_disturbance_breaks_bound(smib_run):
    rngs = [np.random.default_rng([21, i]) for i in range(5)]
    x0s = sample_initial_states(smib_run.certificate, smib_run.levels, smib_run.system, smib_run.polytope, rngs)
    hits = 0
    for i, x0 in enumerate(x0s):
        traj = _trajectory(smib_run, x0, "adversarial_aligned", 10 * smib_run.robustness.eta_bar, 5.0, i)
        hits += _check(smib_run, traj).violated
    assert hits >= 1


@pytest.mark.parametrize("run_name", ["smib_run", "ieee9_run"])
def test_budget_keeps_trajectories_in_X_and_reaches_inner_level(run_name, request):
    run = request.getfixturevalue(run_name)
    rngs = [np.random.default_rng([33, i]) for i in range(3)]
    x0s = sample_initial_states(run.certificate, run.levels, run.system, run.polytope, rngs)
    for i, x0 in enumerate(x0s):
        traj = _trajectory(run, x0, "piecewise_constant_random", run.robustness.eta_bar * (1 - 1e-6), 50.0, i)
        assert np.all(membership_X(run.certificate, run.levels, run.system, run.polytope, traj.states))
        final = evaluate_V(run.certificate.lyapunov, run.system, run.certificate.sector, traj.states[-1])
        assert final < run.levels.Vhat_max
