import numpy as np
import pytest

from stabscope.damping import builtin_damping
from stabscope.evolution import (
    DecayFit,
    EnergyTrace,
    WaveState,
    cfl_limit,
    damped_spectrum_1d,
    decay_fit,
    energy_balance_defect,
    evolve,
    p_spectrum_1d,
    quasimode_probe,
    resolvent_grid,
    resolvent_scan,
    resolvent_to_csv,
    spectrum_to_csv,
    trace_to_csv,
)
from stabscope.fields import Field, make_grid
from stabscope.potentials import builtin_potential, sublevel_radius
from stabscope.quasimodes import turning_point_bump

H1 = builtin_potential("harmonic", d=1)
B_OFF = builtin_damping("constant", d=1, amplitude=0.0)
B_ONE = builtin_damping("constant", d=1, amplitude=1.0)


def gaussian_state(n=512, halfwidth=9.0):
    grid = make_grid(1, n, halfwidth)
    u = Field(grid, np.exp(-grid.axis(0) ** 2 / 2.0))
    v = Field(grid, np.zeros(n))
    return grid, WaveState(u, v)


@pytest.fixture(scope="module")
def damped_run():
    _, state = gaussian_state()
    return evolve(H1, B_ONE, state, 10.0, 1e-3)


@pytest.fixture(scope="module")
def probe_runs():
    # turning bump far out on the harmonic ramp; the grid box [37.5, 45.5]
    # keeps the checkerboard cell [41, 42) (undamped) around the support
    grid = make_grid(1, 1025, 4.0, center=[41.5])
    f, rep = turning_point_bump(H1, [41.5], 1.5, grid=grid)
    cases = {
        "off": B_OFF,
        "constant": B_ONE,
        "exterior": builtin_damping("exterior", d=1, radius=1.0),
        "ball": builtin_damping("ball", d=1, radius=1.0),
        "checkerboard": builtin_damping("checkerboard", d=1, period=2.0, duty=0.5),
    }
    runs = {
        name: quasimode_probe(H1, b, f, rep.lam, 3.0 / rep.lam)
        for name, b in cases.items()
    }
    return rep.lam, runs


@pytest.fixture(scope="module")
def small_scan():
    lams = np.array([1.0, 1.5, 2.0])
    return lams, resolvent_scan(H1, B_OFF, lams)


@pytest.fixture(scope="module")
def spectrum_setup():
    grid = make_grid(1, 1201, 12.0)
    mu2 = p_spectrum_1d(H1, grid, 40)
    return grid, mu2


def test_undamped_energy_conserved():
    _, state = gaussian_state()
    trace = evolve(H1, B_OFF, state, 10.0, 1e-4, record_every=100)
    assert trace.t[0] == 0.0
    assert trace.t[-1] == pytest.approx(10.0)
    assert trace.E[0] > 0.0
    assert abs(trace.E[-1] / trace.E[0] - 1.0) <= 1e-6
    assert trace.balance_coefficient <= 1e-6
    assert np.all(trace.D == 0.0)


def test_unit_damping_decay_rate(damped_run):
    fit = decay_fit(damped_run)
    assert 0.9 <= fit.tau <= 1.1
    assert fit.flags == ()


def test_energy_monotone_under_damping(damped_run):
    # discrete dissipation holds up to quadrature error of order dt^2
    assert float(np.max(np.diff(damped_run.E))) <= 1e-10


def test_balance_defect_is_second_order():
    _, state = gaussian_state()
    coarse = energy_balance_defect(evolve(H1, B_ONE, state, 10.0, 1e-3))
    fine = energy_balance_defect(evolve(H1, B_ONE, state, 10.0, 5e-4))
    assert coarse / fine >= 3.5


def test_zero_data_stays_zero():
    grid = make_grid(1, 128, 6.0)
    z = Field(grid, np.zeros(128))
    trace = evolve(H1, B_ONE, WaveState(z, z), 1.0, 1e-3)
    assert np.all(trace.E == 0.0)
    assert np.all(trace.D == 0.0)


def test_evolve_keeps_final_state():
    _, state = gaussian_state(n=128, halfwidth=6.0)
    trace = evolve(H1, B_ONE, state, 0.5, 1e-3, keep_final=True)
    assert trace.final_state is not None
    assert trace.final_state.t == pytest.approx(0.5)
    assert trace.final_state.u.grid == state.u.grid


def test_evolve_rejects_bad_input():
    grid, state = gaussian_state(n=128, halfwidth=6.0)
    h2 = builtin_potential("harmonic", d=2)
    with pytest.raises(ValueError, match="dimensions differ"):
        evolve(h2, B_ONE, state, 1.0, 1e-3)
    with pytest.raises(ValueError, match="need 0 < dt <= T_final"):
        evolve(H1, B_ONE, state, 1.0, -1e-3)
    with pytest.raises(ValueError, match="need 0 < dt <= T_final"):
        evolve(H1, B_ONE, state, 1e-4, 1e-3)
    with pytest.raises(ValueError, match="CFL bound"):
        evolve(H1, B_ONE, state, 1.0, 10.0 * cfl_limit(H1, grid))


def test_cfl_limit_shrinks_with_mesh():
    coarse = cfl_limit(H1, make_grid(1, 128, 6.0))
    fine = cfl_limit(H1, make_grid(1, 512, 6.0))
    assert 0.0 < fine < coarse


def test_decay_fit_recovers_synthetic_exponential():
    t = np.linspace(0.0, 10.0, 101)
    trace = EnergyTrace(t=t, E=3.0 * np.exp(-t / 2.0), D=np.zeros_like(t), dt=0.1,
                        balance_coefficient=0.0)
    fit = decay_fit(trace)
    assert fit.C == pytest.approx(3.0, abs=1e-10)
    assert fit.tau == pytest.approx(2.0, abs=1e-10)
    assert fit.rms <= 1e-12
    # fit window skips the first tenth of the samples
    assert fit.window[0] == pytest.approx(1.1)
    assert fit.window[1] == pytest.approx(10.0)
    assert fit.flags == ()


def test_decay_fit_flat_trace_flags_no_decay():
    t = np.linspace(0.0, 5.0, 51)
    trace = EnergyTrace(t=t, E=np.ones_like(t), D=np.zeros_like(t), dt=0.1,
                        balance_coefficient=0.0)
    fit = decay_fit(trace)
    assert "no_decay" in fit.flags
    assert fit.tau == np.inf


def test_decay_fit_truncates_at_floor():
    t = np.linspace(0.0, 60.0, 601)
    trace = EnergyTrace(t=t, E=np.exp(-2.0 * t), D=np.zeros_like(t), dt=0.1,
                        balance_coefficient=0.0)
    fit = decay_fit(trace)
    assert "floor_truncated" in fit.flags
    assert fit.tau == pytest.approx(0.5, rel=1e-6)
    assert fit.window[1] < 60.0


def test_decay_fit_needs_two_usable_samples():
    t = np.array([0.0, 1.0, 2.0])
    trace = EnergyTrace(t=t, E=np.array([1.0, 1e-40, 1e-40]), D=np.zeros(3), dt=1.0,
                        balance_coefficient=0.0)
    with pytest.raises(ValueError, match="fewer than two usable samples"):
        decay_fit(trace)


def test_probe_undamped_is_conservative(probe_runs):
    _, runs = probe_runs
    trace, _ = runs["off"]
    assert abs(trace.E[-1] / trace.E[0] - 1.0) <= 1e-6


def test_probe_unit_damping_matches_modal_rate(probe_runs):
    _, runs = probe_runs
    _, fit = runs["constant"]
    assert fit.tau == pytest.approx(1.0, rel=0.25)


def test_probe_blind_spots_slow_decay(probe_runs):
    _, runs = probe_runs
    ref = runs["constant"][1].tau
    # bump support sits inside an undamped checkerboard cell and far from the
    # ball, so neither damping touches the packet over the short window
    assert runs["checkerboard"][1].tau >= 5.0 * ref
    assert runs["ball"][1].tau >= 5.0 * ref
    # exterior damping covers the whole probe box, so it matches b = 1 exactly
    assert runs["exterior"][1].tau == pytest.approx(ref, rel=1e-12)


def test_resolvent_growth_matches_probe_decay(resolvent_suite, probe_runs):
    # categorical agreement: a growing frequency sweep pairs with a probe
    # that outlives the constant-damping reference by 5x or more
    _, runs = probe_runs
    ref_tau = runs["constant"][1].tau
    for name, scan in resolvent_suite["scans"].items():
        ratio = scan.ratio
        k = len(ratio) // 10
        growth = float(np.max(ratio[-k:]) / np.max(ratio[:k]))
        slow_decay = runs[name][1].tau >= 5.0 * ref_tau
        assert (growth >= 1.5) == slow_decay, (name, growth, runs[name][1].tau)


def test_resolvent_matches_spectral_gap(small_scan):
    lams, scan = small_scan
    grid = make_grid(1, scan.grid_ns[0], scan.grid_ls[0])
    mu2 = p_spectrum_1d(H1, grid, 12)
    for lam, sig in zip(lams, scan.sigma_min):
        gap = float(np.min(np.abs(mu2 - lam**2)))
        assert sig == pytest.approx(gap, rel=0.05)
    assert set(scan.flags) <= {"ok", "bisect"}
    assert np.all(scan.ratio == np.abs(scan.lambdas) / scan.sigma_min)


def test_resolvent_frequency_symmetry(small_scan):
    lams, scan = small_scan
    neg = resolvent_scan(H1, B_OFF, -lams)
    assert np.max(np.abs(neg.sigma_min - scan.sigma_min)) <= 1e-10


def test_resolvent_bisect_fallback_agrees(small_scan):
    lams, scan = small_scan
    forced = resolvent_scan(H1, B_OFF, lams, maxiter=0)
    assert all(flag == "bisect" for flag in forced.flags)
    assert np.max(np.abs(forced.sigma_min - scan.sigma_min) / scan.sigma_min) <= 1e-8


def test_resolvent_grid_covers_sublevel_set():
    grid = resolvent_grid(H1, 2.0)
    assert grid.d == 1
    assert grid.ls[0] >= sublevel_radius(H1, 16.0) * (1.0 - 1e-12)


def test_resolvent_scan_rejects_bad_input():
    h2 = builtin_potential("harmonic", d=2)
    b2 = builtin_damping("constant", d=2, amplitude=0.0)
    with pytest.raises(ValueError, match="requires d = 1"):
        resolvent_scan(h2, b2, [1.0])
    with pytest.raises(ValueError, match="at least one frequency"):
        resolvent_scan(H1, B_OFF, [])
    with pytest.raises(ValueError, match="positive frequency"):
        resolvent_scan(H1, B_OFF, [0.0])
    with pytest.raises(ValueError, match="Dirichlet box too small"):
        resolvent_scan(H1, B_OFF, [1.0, 1.5, 2.0], grid=make_grid(1, 64, 2.0))


def test_p_spectrum_matches_oscillator_ladder(spectrum_setup):
    _, mu2 = spectrum_setup
    assert np.allclose(mu2[:8], np.arange(8) + 0.5, atol=1e-5)
    assert np.all(np.diff(mu2) > 0.0)


def test_p_spectrum_rejects_bad_input():
    with pytest.raises(ValueError, match="spectrum requires d = 1"):
        p_spectrum_1d(builtin_potential("harmonic", d=2), make_grid(2, 32, 4.0), 4)
    with pytest.raises(ValueError, match="count out of range"):
        p_spectrum_1d(H1, make_grid(1, 32, 6.0), 40)


def test_damped_spectrum_satisfies_quadratic(spectrum_setup):
    grid, mu2 = spectrum_setup
    result = damped_spectrum_1d(H1, B_ONE, grid, 40)
    z = result.values
    # each eigenvalue solves z^2 + z + mu_k^2 = 0 for some Dirichlet mu_k^2
    quad = np.min(np.abs(z[:, None] ** 2 + z[:, None] + mu2[None, :]), axis=1)
    assert float(np.max(quad)) <= 1e-6
    assert set(result.flags) == {"ok"}
    assert result.abscissa == pytest.approx(-0.5, rel=0.05)


def test_undamped_spectrum_sits_on_axis(spectrum_setup):
    grid, mu2 = spectrum_setup
    result = damped_spectrum_1d(H1, B_OFF, grid, 40)
    assert float(np.max(np.abs(result.values.real))) <= 1e-8
    mus = np.sqrt(mu2)
    gap = np.min(np.abs(np.abs(result.values.imag)[:, None] - mus[None, :]), axis=1)
    assert float(np.max(gap)) <= 1e-8
    assert result.abscissa == pytest.approx(0.0, abs=1e-8)


def test_damped_spectrum_rejects_bad_input(spectrum_setup):
    grid, _ = spectrum_setup
    with pytest.raises(ValueError, match="damped spectrum requires d = 1"):
        damped_spectrum_1d(builtin_potential("harmonic", d=2),
                           builtin_damping("constant", d=2, amplitude=1.0),
                           make_grid(2, 32, 4.0), 4)
    with pytest.raises(ValueError, match="at or below 200"):
        damped_spectrum_1d(H1, B_ONE, grid, 201)


def test_trace_csv_layout(tmp_path):
    t = np.linspace(0.0, 1.0, 5)
    trace = EnergyTrace(t=t, E=np.exp(-t), D=0.5 * np.ones_like(t), dt=0.25,
                        balance_coefficient=0.0)
    path = tmp_path / "trace.csv"
    trace_to_csv(trace, path)
    raw = path.read_bytes().decode()
    assert "\r" not in raw
    lines = raw.strip().split("\n")
    assert lines[0] == "t,E,D"
    assert len(lines) == 6
    cells = lines[2].split(",")
    assert float(cells[0]) == t[1]
    assert float(cells[1]) == trace.E[1]


def test_resolvent_csv_layout(tmp_path, small_scan):
    _, scan = small_scan
    path = tmp_path / "scan.csv"
    resolvent_to_csv(scan, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "lambda,sigma_min,lambda_over_sigma_min,flag"
    assert len(lines) == 4
    cells = lines[1].split(",")
    assert float(cells[0]) == scan.lambdas[0]
    assert float(cells[1]) == scan.sigma_min[0]
    assert cells[3] in {"ok", "bisect"}


def test_spectrum_csv_layout(tmp_path, spectrum_setup):
    grid, _ = spectrum_setup
    result = damped_spectrum_1d(H1, B_ONE, grid, 8)
    path = tmp_path / "spec.csv"
    spectrum_to_csv(result, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "re,im,residual"
    assert len(lines) == 9
    cells = lines[1].split(",")
    assert float(cells[0]) == result.values[0].real
    assert float(cells[1]) == result.values[0].imag
