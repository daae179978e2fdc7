"""Damped-wave time integration and the stationary frequency-side criteria.

The stepper is a leapfrog with the damping handled semi-implicitly, so the
update stays explicit in the elliptic part while remaining stable for
indicator-sized coefficients.  Energy and dissipation traces feed a
log-linear decay fit; the frequency side offers a banded resolvent scan and
a companion-matrix spectrum on the line, both built from the same stencil
as the time stepper so the two views are directly comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import trapezoid
from scipy.linalg import cholesky_banded, eig_banded, solve_banded

from .damping import Damping, _ordered_map
from .fields import _STENCIL, Field, Grid, _second_derivative, check_resolution, make_grid
from .potentials import Potential, sublevel_radius

RESOLVENT_PPW = 16


@dataclass
class WaveState:
    """Displacement and velocity on a shared grid."""

    u: Field
    v: Field
    t: float = 0.0

    def __post_init__(self):
        if self.u.grid != self.v.grid:
            raise ValueError("displacement and velocity live on different grids")


@dataclass(frozen=True)
class EnergyTrace:
    """Sampled energy E and dissipation D = <v, b v> along a run."""

    t: np.ndarray
    E: np.ndarray
    D: np.ndarray
    dt: float
    balance_coefficient: float
    final_state: WaveState | None = None


@dataclass(frozen=True)
class DecayFit:
    """Log-linear fit E ~ C exp(-t/tau) over the stated window."""

    C: float
    tau: float
    rms: float
    window: tuple
    flags: tuple


def cfl_limit(pot: Potential, grid: Grid) -> float:
    """Largest admissible dt: 0.5 h / sqrt(1 + max V on the grid)."""
    vmax = float(np.max(pot.raw_value(grid.meshgrid())))
    return 0.5 * min(grid.hs) / math.sqrt(1.0 + vmax)


def _weights(grid: Grid):
    ws = grid.trapezoid_weights()
    if grid.d == 1:
        return ws[0]
    return np.outer(ws[0], ws[1])


def evolve(
    pot: Potential,
    b: Damping,
    state: WaveState,
    T_final: float,
    dt: float,
    *,
    record_every: int = 1,
    keep_final: bool = False,
) -> EnergyTrace:
    """March the damped wave equation and record (t, E, D).

    Leapfrog in the elliptic part; the damping enters through the centered
    velocity, so each update divides by (1 + dt b/2) pointwise.  Raises on a
    CFL violation up front and aborts on NaN mid-run.
    """
    grid = state.u.grid
    if pot.d != grid.d or b.d != grid.d:
        raise ValueError("potential, damping, and state dimensions differ")
    if dt <= 0.0 or T_final < dt:
        raise ValueError("need 0 < dt <= T_final")
    limit = cfl_limit(pot, grid)
    if dt > limit * (1.0 + 1e-12):
        raise ValueError(f"dt violates the CFL bound: dt={dt:.6g} > {limit:.6g}")

    mesh = grid.meshgrid()
    vvals = pot.raw_value(mesh)
    bvals = b.raw_func(mesh)
    denom = 1.0 + 0.5 * dt * bvals
    w = _weights(grid)

    def apply_p(arr):
        out = vvals * arr
        for ax in range(grid.d):
            out -= 0.5 * _second_derivative(arr, ax, grid.hs[ax])
        return out

    def energy_of(u_arr, pu_arr, v_arr):
        quad = float(np.sum(w * (np.conj(u_arr) * pu_arr).real))
        kin = float(np.sum(w * np.abs(v_arr) ** 2))
        return 0.5 * (quad + kin)

    def dissipation_of(v_arr):
        return float(np.sum(w * bvals * np.abs(v_arr) ** 2))

    n_steps = int(round(T_final / dt))
    u_prev = state.u.values.astype(complex)
    v0 = state.v.values.astype(complex)
    pu = apply_p(u_prev)

    e_prev = energy_of(u_prev, pu, v0)
    d_prev = dissipation_of(v0)
    ts, es, ds = [state.t], [e_prev], [d_prev]

    u_curr = u_prev + dt * v0 + 0.5 * dt * dt * (-pu - bvals * v0)
    balance = 0.0
    for n in range(1, n_steps + 1):
        pu = apply_p(u_curr)
        u_next = (2.0 * u_curr - u_prev - dt * dt * pu + 0.5 * dt * bvals * u_prev) / denom
        v_curr = (u_next - u_prev) / (2.0 * dt)
        e_curr = energy_of(u_curr, pu, v_curr)
        d_curr = dissipation_of(v_curr)
        defect = abs(e_curr - e_prev + dt * 0.5 * (d_curr + d_prev))
        balance = max(balance, defect / (dt * (e_prev + 1.0)))
        if n % 64 == 0 and not np.isfinite(u_next.ravel()[:: max(1, u_next.size // 4096)]).all():
            raise RuntimeError(f"time integration produced NaN at t={n * dt:.6g}")
        if n % record_every == 0 or n == n_steps:
            ts.append(state.t + n * dt)
            es.append(e_curr)
            ds.append(d_curr)
        e_prev, d_prev = e_curr, d_curr
        u_prev, u_curr = u_curr, u_next

    final = None
    if keep_final:
        final = WaveState(
            Field(grid, u_prev), Field(grid, (u_curr - u_prev) / dt), state.t + n_steps * dt
        )
    return EnergyTrace(
        t=np.array(ts),
        E=np.array(es),
        D=np.array(ds),
        dt=dt,
        balance_coefficient=balance,
        final_state=final,
    )


def energy_balance_defect(trace: EnergyTrace) -> float:
    """|E(T) - E(0) + integral of D| on the recorded samples."""
    return float(abs(trace.E[-1] - trace.E[0] + trapezoid(trace.D, trace.t)))


def decay_fit(trace: EnergyTrace) -> DecayFit:
    """Least squares on log E over the window after the initial transient.

    The first 10% of samples are excluded; samples at or below the round-off
    floor truncate the window (flag "floor_truncated"); a slope above -1e-12
    flags "no_decay" and reports an infinite time constant.
    """
    n = len(trace.t)
    start = max(1, int(math.ceil(0.1 * n)))
    t = trace.t[start:]
    e = trace.E[start:]
    flags = []
    floor = float(np.max(trace.E)) * 1e-25
    bad = np.nonzero(e <= floor)[0]
    if bad.size:
        t, e = t[: bad[0]], e[: bad[0]]
        flags.append("floor_truncated")
    if len(t) < 2:
        raise ValueError("decay fit window has fewer than two usable samples")
    loge = np.log(e)
    slope, intercept = np.polyfit(t, loge, 1)
    rms = float(np.sqrt(np.mean((loge - (slope * t + intercept)) ** 2)))
    if slope >= -1e-12:
        flags.append("no_decay")
        tau = math.inf
    else:
        tau = -1.0 / slope
    return DecayFit(
        C=float(np.exp(intercept)),
        tau=float(tau),
        rms=rms,
        window=(float(t[0]), float(t[-1])),
        flags=tuple(flags),
    )


def quasimode_probe(pot: Potential, b: Damping, f: Field, lam: float, T_final: float, dt: float | None = None):
    """Evolve (f, i lam f) and fit the energy decay.

    The window is the caller's choice; the packet's own coherence scale is
    of order 1/lam, which is the regime where an asymptotically undamped
    packet shows its slow decay.
    """
    check_resolution(f.grid, lam)
    if dt is None:
        dt = 0.5 * cfl_limit(pot, f.grid)
    n_steps = max(int(round(T_final / dt)), 40)
    dt = T_final / n_steps
    state = WaveState(f.copy(), Field(f.grid, 1j * lam * f.values), 0.0)
    stride = max(1, n_steps // 2000)
    trace = evolve(pot, b, state, T_final, dt, record_every=stride)
    return trace, decay_fit(trace)


@dataclass(frozen=True)
class ResolventScan:
    """lam / sigma_min along a frequency grid, with per-entry method flags."""

    lambdas: np.ndarray
    sigma_min: np.ndarray
    ratio: np.ndarray
    flags: tuple
    grid_ns: tuple
    grid_ls: tuple


def resolvent_grid(pot: Potential, lam_max: float) -> Grid:
    """Dirichlet box at sublevel_radius(4 lam_max^2), carrier-resolved."""
    L = sublevel_radius(pot, 4.0 * lam_max**2)
    h = 2.0 * np.pi / (RESOLVENT_PPW * lam_max)
    n = int(math.ceil(2.0 * L / h)) + 1
    return make_grid(1, n, L)


def _stencil_bands(grid: Grid, diag: np.ndarray) -> np.ndarray:
    """Banded (lu=(2,2)) matrix of -Laplacian/2 + diag on the line."""
    n = grid.ns[0]
    h2 = grid.hs[0] ** 2
    ab = np.zeros((5, n), dtype=complex)
    ab[0, :] = ab[4, :] = -0.5 * _STENCIL[0] / h2
    ab[1, :] = ab[3, :] = -0.5 * _STENCIL[1] / h2
    ab[2, :] = -0.5 * _STENCIL[2] / h2 + diag
    return ab


def _sigma_min(ab: np.ndarray, maxiter: int = 500, tol: float = 1e-12):
    """Smallest singular value by inverse iteration on the normal equations.

    The matrix is complex symmetric, so the adjoint solve reuses the
    conjugated bands.  Falls back to bisection on shifted Cholesky
    factorizations of A*A when the iteration stalls.
    """
    n = ab.shape[1]
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v /= np.linalg.norm(v)
    abh = np.conj(ab)
    mu_prev = 0.0
    for _ in range(maxiter):
        z = solve_banded((2, 2), abh, v)
        w = solve_banded((2, 2), ab, z)
        mu = float(np.linalg.norm(w))
        v = w / mu
        if abs(mu - mu_prev) <= tol * mu:
            sigma = 1.0 / math.sqrt(mu)
            return sigma, "ok"
        mu_prev = mu
    return _sigma_min_bisect(ab, hint=1.0 / math.sqrt(mu_prev) if mu_prev > 0 else 1.0)


def _banded_to_sparse(ab: np.ndarray):
    # solve_banded layout: ab[2 + i - j, j] = A[i, j]
    n = ab.shape[1]
    diags, offs = [], []
    for o in range(-2, 3):
        row = ab[2 - o]
        diags.append(row[o:] if o >= 0 else row[: n + o])
        offs.append(o)
    return sp.diags(diags, offs, format="csr")


def _sigma_min_bisect(ab: np.ndarray, hint: float):
    n = ab.shape[1]
    a_sp = _banded_to_sparse(ab)
    normal = (a_sp.conj().T @ a_sp).todia()
    upper = np.zeros((5, n), dtype=complex)
    for off, data in zip(normal.offsets, normal.data):
        if off >= 0:
            upper[4 - off, :] = data

    def posdef(mu2: float) -> bool:
        shifted = upper.copy()
        shifted[4, :] -= mu2
        try:
            cholesky_banded(shifted, lower=False)
            return True
        except np.linalg.LinAlgError:
            return False

    hi = max(hint * 4.0, 1e-300) ** 2
    tries = 0
    while posdef(hi) and tries < 200:
        hi *= 4.0
        tries += 1
    if tries >= 200:
        return float("nan"), "failed"
    lo = 0.0
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        if posdef(mid):
            lo = mid
        else:
            hi = mid
    return math.sqrt(0.5 * (lo + hi)), "bisect"


def resolvent_scan(
    pot: Potential,
    b: Damping,
    lambdas,
    grid: Grid | None = None,
    *,
    threads: int = 1,
    maxiter: int = 500,
) -> ResolventScan:
    """Scan lam / sigma_min(P - lam^2 + i lam b) over the frequency grid."""
    if pot.d != 1 or b.d != 1:
        raise ValueError("resolvent scan requires d = 1")
    lams = np.asarray(list(lambdas), dtype=float)
    if lams.size == 0:
        raise ValueError("need at least one frequency")
    lam_max = float(np.max(np.abs(lams)))
    if lam_max <= 0.0:
        raise ValueError("need a positive frequency somewhere in the grid")
    if grid is None:
        grid = resolvent_grid(pot, lam_max)
    else:
        if grid.d != 1:
            raise ValueError("resolvent scan requires d = 1")
        check_resolution(grid, lam_max, RESOLVENT_PPW)
        needed = sublevel_radius(pot, 4.0 * lam_max**2)
        if grid.ls[0] < needed * (1.0 - 1e-9):
            raise ValueError(f"Dirichlet box too small: need half-width >= {needed:.6g}")

    x = grid.meshgrid()
    vvals = pot.raw_value(x)[:]
    bvals = b.raw_func(x)[:]

    def one(lam: float):
        ab = _stencil_bands(grid, vvals - lam**2 + 1j * lam * bvals)
        return _sigma_min(ab, maxiter=maxiter)

    results = _ordered_map(one, [float(l) for l in lams], threads)
    sig = np.array([r[0] for r in results])
    flags = tuple(r[1] for r in results)
    return ResolventScan(
        lambdas=lams,
        sigma_min=sig,
        ratio=np.abs(lams) / sig,
        flags=flags,
        grid_ns=grid.ns,
        grid_ls=grid.ls,
    )


def p_spectrum_1d(pot: Potential, grid: Grid, count: int) -> np.ndarray:
    """Lowest count eigenvalues of the discretized P, ascending."""
    if grid.d != 1:
        raise ValueError("spectrum requires d = 1")
    n = grid.ns[0]
    if count < 1 or count > n:
        raise ValueError("count out of range")
    h2 = grid.hs[0] ** 2
    band = np.zeros((3, n))
    band[0, :] = -0.5 * _STENCIL[0] / h2
    band[1, :] = -0.5 * _STENCIL[1] / h2
    band[2, :] = -0.5 * _STENCIL[2] / h2 + pot.raw_value(grid.meshgrid())
    return eig_banded(band, lower=False, eigvals_only=True, select="i", select_range=(0, count - 1))


@dataclass(frozen=True)
class SpectrumResult:
    """Eigenvalues of the first-order companion system nearest the origin."""

    values: np.ndarray
    residuals: np.ndarray
    flags: tuple

    @property
    def abscissa(self) -> float:
        return float(np.max(self.values.real))


def damped_spectrum_1d(pot: Potential, b: Damping, grid: Grid, count: int) -> SpectrumResult:
    """Modes of (0, I; -P, -b): shift-invert Arnoldi around the origin."""
    if pot.d != 1 or b.d != 1 or grid.d != 1:
        raise ValueError("damped spectrum requires d = 1")
    if count > 200:
        raise ValueError("count must stay at or below 200")
    n = grid.ns[0]
    h2 = grid.hs[0] ** 2
    offs = list(range(-2, 3))
    bands = [np.full(n - abs(k), -0.5 * _STENCIL[2 + k] / h2) for k in offs]
    p_mat = sp.diags(bands, offs, format="csr") + sp.diags(pot.raw_value(grid.meshgrid()))
    b_mat = sp.diags(b.raw_func(grid.meshgrid()))
    eye = sp.identity(n)
    comp = sp.bmat([[None, eye], [-p_mat, -b_mat]], format="csc")
    v0 = np.ones(2 * n)
    vals, vecs = spla.eigs(comp, k=count, sigma=0.0, which="LM", v0=v0)
    res = np.array(
        [
            float(np.linalg.norm(comp @ vecs[:, j] - vals[j] * vecs[:, j]) / np.linalg.norm(vecs[:, j]))
            for j in range(vals.size)
        ]
    )
    order = np.argsort(np.abs(vals), kind="stable")
    vals, res = vals[order], res[order]
    scale = float(np.abs(vals).max()) if vals.size else 1.0
    flags = tuple("ok" if r <= 1e-8 * max(scale, 1.0) else "poor" for r in res)
    return SpectrumResult(values=vals, residuals=res, flags=flags)


def _fmt(x) -> str:
    return repr(float(x))


def trace_to_csv(trace: EnergyTrace, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("t,E,D\n")
        for t, e, d in zip(trace.t, trace.E, trace.D):
            fh.write(f"{_fmt(t)},{_fmt(e)},{_fmt(d)}\n")


def resolvent_to_csv(scan: ResolventScan, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("lambda,sigma_min,lambda_over_sigma_min,flag\n")
        for lam, s, r, fl in zip(scan.lambdas, scan.sigma_min, scan.ratio, scan.flags):
            fh.write(f"{_fmt(lam)},{_fmt(s)},{_fmt(r)},{fl}\n")


def spectrum_to_csv(result: SpectrumResult, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("re,im,residual\n")
        for z, r in zip(result.values, result.residuals):
            fh.write(f"{_fmt(z.real)},{_fmt(z.imag)},{_fmt(r)}\n")
