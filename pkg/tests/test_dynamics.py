import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from stabscope.dynamics import (
    PhaseState,
    flow_integrate,
    hamiltonian_field,
    linearization_deviation,
    rescaled_flow,
    sample_shell,
    trajectory_to_csv,
)
from stabscope.potentials import builtin_potential, epsilon_lambda


def test_hamiltonian_field_harmonic(harmonic_2d):
    vel, force = hamiltonian_field(harmonic_2d, PhaseState(np.array([1.0, 0.0]), np.array([0.0, 2.0])))
    assert np.array_equal(vel, np.array([0.0, 2.0]))
    assert np.array_equal(force, np.array([-1.0, 0.0]))


def test_hamiltonian_field_rest(power3_2d):
    vel, _ = hamiltonian_field(power3_2d, PhaseState(np.array([1.0, -3.0]), np.zeros(2)))
    assert np.all(vel == 0.0)


def test_hamiltonian_field_power_force(power3_1d):
    # -s x (1 + x^2)^(s/2 - 1) at x = 1 gives -3 sqrt(2)
    _, force = hamiltonian_field(power3_1d, PhaseState(np.array([1.0]), np.array([0.0])))
    assert abs(float(force[0]) + 3.0 * math.sqrt(2.0)) <= 1e-12


def test_flow_quarter_period(harmonic_1d):
    # step chosen so an integer number of steps lands exactly on T = pi/2
    T = math.pi / 2.0
    traj = flow_integrate(harmonic_1d, PhaseState(np.array([1.0]), np.array([0.0])), T, T / 15708)
    assert abs(float(traj.x[-1, 0]) - 0.0) <= 1e-6
    assert abs(float(traj.xi[-1, 0]) + 1.0) <= 1e-6


def test_flow_equilibrium(harmonic_1d):
    traj = flow_integrate(harmonic_1d, PhaseState(np.zeros(1), np.zeros(1)), 1.0, 1e-3)
    assert np.all(traj.x == 0.0)
    assert np.all(traj.xi == 0.0)


def test_flow_power_matches_adaptive_reference(power3_1d):
    s0 = PhaseState(np.array([0.5]), np.array([1.0]))
    traj = flow_integrate(power3_1d, s0, 10.0, 1e-4)
    assert traj.drift <= 1e-8

    def rhs(_t, z):
        x, xi = z[:1], z[1:]
        vel, force = hamiltonian_field(power3_1d, PhaseState(x, xi))
        return np.concatenate([vel, force])

    ref = solve_ivp(rhs, (0.0, 10.0), np.array([0.5, 1.0]), method="DOP853",
                    rtol=1e-12, atol=1e-12)
    end = ref.y[:, -1]
    assert abs(float(traj.x[-1, 0]) - end[0]) <= 1e-5
    assert abs(float(traj.xi[-1, 0]) - end[1]) <= 1e-5


def test_time_reversal(harmonic_1d):
    fwd = flow_integrate(harmonic_1d, PhaseState(np.array([1.0]), np.array([0.0])), 10.0, 1e-3)
    back = flow_integrate(
        harmonic_1d,
        PhaseState(fwd.x[-1].copy(), -fwd.xi[-1]),
        10.0,
        1e-3,
    )
    assert abs(float(back.x[-1, 0]) - 1.0) <= 1e-8
    assert abs(float(back.xi[-1, 0]) - 0.0) <= 1e-8


def test_closed_form_harmonic(flow_reference_runs):
    traj = flow_reference_runs["closed"]
    t = traj.t
    x_ref = 1.0 * np.cos(t) + 0.5 * np.sin(t)
    xi_ref = -1.0 * np.sin(t) + 0.5 * np.cos(t)
    err = max(np.max(np.abs(traj.x[:, 0] - x_ref)), np.max(np.abs(traj.xi[:, 0] - xi_ref)))
    assert err <= 1e-6


def test_long_horizon_drift(flow_reference_runs):
    for pot, drift in flow_reference_runs["drifts"]:
        assert drift <= 1e-6, f"{pot.label} d={pot.d}: drift {drift:.3e}"


def test_long_horizon_drift_harmonic_tight(harmonic_1d):
    # verlet energy oscillation scales with p0 * dt^2 / 8, so the 1e-8 bar
    # needs small-amplitude data; p0 = 0.025 here.
    traj = flow_integrate(harmonic_1d, PhaseState(np.array([0.2]), np.array([0.1])), 100.0, 1e-3)
    assert traj.drift <= 1e-8, f"harmonic tight drift {traj.drift:.3e}"


def test_flow_rejects_bad_steps(harmonic_1d):
    with pytest.raises(ValueError, match="need dt > 0"):
        flow_integrate(harmonic_1d, PhaseState(np.ones(1), np.ones(1)), 1.0, -0.1)


def test_flow_unstable_aborts(harmonic_1d):
    with pytest.raises(RuntimeError, match="integrator unstable"):
        flow_integrate(harmonic_1d, PhaseState(np.array([1.0]), np.array([0.0])), 200.0, 2.1)


def test_rescaled_identity(harmonic_1d):
    y0 = np.array([0.3])
    eta0 = np.array([math.sqrt(2.0 * (1.0 - 0.045))])
    out = rescaled_flow(harmonic_1d, y0, eta0, 0.0, 1.0)
    assert abs(float(out.x[0]) - 0.3) <= 1e-12
    assert abs(float(out.xi[0]) - eta0[0]) <= 1e-12


def test_rescaled_harmonic_closed_form(harmonic_1d):
    # y_s = sqrt(2) lam sin(s/lam) / lam, eta_s = sqrt(2) cos(s/lam)
    lam = 10.0
    out = rescaled_flow(harmonic_1d, np.zeros(1), np.array([math.sqrt(2.0)]), 3.7, lam)
    assert abs(float(out.x[0]) - math.sqrt(2.0) * lam * math.sin(0.37)) <= 1e-6
    assert abs(float(out.xi[0]) - math.sqrt(2.0) * math.cos(0.37)) <= 1e-6


def test_rescaled_energy_identity_power(power3_1d):
    lam = 50.0
    y0 = np.array([1.0])
    v0 = float(power3_1d.value(y0))
    eta0 = np.array([math.sqrt(2.0 * (lam**2 - v0)) / lam])
    worst = 0.0
    for s in np.linspace(-5.0, 5.0, 9):
        if s == 0.0:
            continue
        out = rescaled_flow(power3_1d, y0, eta0, float(s), lam, dt=1e-4)
        p = float(power3_1d.value(out.x)) + 0.5 * lam**2 * float(np.dot(out.xi, out.xi))
        worst = max(worst, abs(p - lam**2) / lam**2)
    assert worst <= 1e-7


def test_rescaled_rejects_off_shell(harmonic_1d):
    with pytest.raises(ValueError, match="not on the rescaled energy shell"):
        rescaled_flow(harmonic_1d, np.array([1.0]), np.array([1.0]), 1.0, 10.0)


def test_linearization_turning_points(harmonic_1d):
    prof = epsilon_lambda(harmonic_1d, [25.0, 100.0, 400.0])
    expected_bound_y = {25.0: 1.1951494269471545, 100.0: 0.29878135129889744, 400.0: 0.07470723027386945}
    for lam, bound_y in expected_bound_y.items():
        y0 = np.array([math.sqrt(2.0) * lam])
        rep = linearization_deviation(harmonic_1d, y0, np.zeros(1), 2.0, lam, prof)
        assert rep.bound_y == pytest.approx(bound_y, rel=1e-9)
        assert rep.y_ok and rep.eta_ok
        assert rep.dev_y <= rep.bound_y
        assert rep.dev_eta <= rep.bound_eta


def test_linearization_zero_window(harmonic_1d):
    prof = epsilon_lambda(harmonic_1d, [25.0])
    rep = linearization_deviation(harmonic_1d, np.array([math.sqrt(2.0) * 25.0]), np.zeros(1), 0.0, 25.0, prof)
    assert rep.dev_eta == 0.0
    assert rep.dev_y == 0.0


def test_linearization_bound_monotone(harmonic_1d):
    prof = epsilon_lambda(harmonic_1d, [25.0, 50.0, 100.0])
    bounds = []
    for lam in (25.0, 50.0, 100.0):
        y0 = np.array([math.sqrt(2.0) * lam])
        bounds.append(linearization_deviation(harmonic_1d, y0, np.zeros(1), 2.0, lam, prof).bound_eta)
    assert bounds[0] > bounds[1] > bounds[2]


def test_sample_shell_energies(harmonic_2d):
    rng = np.random.default_rng(3)
    xs, xis = sample_shell(harmonic_2d, 20.0, 50, rng, turning_fraction=0.2)
    assert xs.shape == (50, 2) and xis.shape == (50, 2)
    p = harmonic_2d.raw_value(xs) + 0.5 * np.sum(xis * xis, axis=1)
    assert np.max(np.abs(p - 400.0)) <= 1e-9 * 400.0
    slow = int(np.sum(np.linalg.norm(xis, axis=1) <= 0.1 * 20.0))
    assert slow >= 10


def test_trajectory_csv_layout(tmp_path, harmonic_2d):
    traj = flow_integrate(harmonic_2d, PhaseState(np.array([1.0, 0.0]), np.array([0.0, 1.0])), 0.1, 1e-3)
    path = tmp_path / "traj.csv"
    trajectory_to_csv(traj, path, 2)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x_1,x_2,xi_1,xi_2,p"
    assert len(lines) == len(traj.t) + 1
    row = [float(tok) for tok in lines[1].split(",")]
    assert row[0] == traj.t[0]
    assert row[5] == traj.p[0]
