"""Classical Hamiltonian flow for p(x, xi) = V(x) + |xi|^2 / 2.

The flow is integrated with velocity Verlet, which is symplectic and
time-reversible; the conserved energy p is the accuracy monitor.  All kernels
are batched: states are arrays of shape (..., d) and a whole family of
trajectories advances in lockstep, which is what the shell-sampling scans on
top of this module rely on for speed.

The rescaled picture runs the same flow at energy lam^2 through slow time
s = lam * t with momenta scaled down by lam, so that over |s| <= T the motion
stays uniformly close to the straight line y + s*eta; the admissible drift is
controlled by the potential's smallness factor eps(lam).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .potentials import EpsilonProfile, Potential, as_points, sublevel_radius

__all__ = [
    "PhaseState",
    "Trajectory",
    "hamiltonian_field",
    "flow_integrate",
    "flow_positions",
    "rescaled_flow",
    "linearization_deviation",
    "LinearizationReport",
    "sample_shell",
    "default_dt",
    "trajectory_to_csv",
]


@dataclass(frozen=True)
class PhaseState:
    """A single phase-space point (x, xi)."""

    x: np.ndarray
    xi: np.ndarray

    def energy(self, pot: Potential) -> float:
        return float(pot.value(self.x) + 0.5 * np.sum(self.xi**2))


@dataclass(frozen=True)
class Trajectory:
    """Sampled flow line: strictly increasing times, states, conserved energy."""

    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    p: np.ndarray
    dt: float
    p0: float
    drift: float

    def state(self, k: int) -> PhaseState:
        return PhaseState(self.x[k].copy(), self.xi[k].copy())


def hamiltonian_field(pot: Potential, state: PhaseState):
    """Right-hand side of the flow: (dx/dt, dxi/dt) = (xi, -grad V(x))."""
    return state.xi.copy(), -pot.grad(state.x)


def default_dt(lam: float) -> float:
    """Step size used by the frequency-rescaled kernels."""
    return 1e-3 * min(1.0, 1.0 / np.sqrt(lam))


def _verlet(pot: Potential, x: np.ndarray, xi: np.ndarray, n_steps: int, dt: float):
    """Advance batched states n_steps with velocity Verlet. Mutates copies."""
    x = x.copy()
    xi = xi.copy()
    force = -pot.raw_grad(x)
    for _ in range(n_steps):
        x += dt * xi + (0.5 * dt * dt) * force
        new_force = -pot.raw_grad(x)
        xi += (0.5 * dt) * (force + new_force)
        force = new_force
    return x, xi


def flow_integrate(
    pot: Potential,
    s0: PhaseState,
    T: float,
    dt: float,
    *,
    energy_drift_tol: float = 1e-6,
    record_every: int = 1,
) -> Trajectory:
    """Integrate the flow from s0 over [0, T], sampling every few steps.

    Aborts when the relative energy drift exceeds 100x the tolerance; a drift
    above the tolerance itself is reported on the trajectory for the caller
    to inspect.
    """
    if dt <= 0.0 or T < dt:
        raise ValueError("need dt > 0 and T >= dt")
    x = as_points(s0.x, pot.d).astype(float)
    xi = as_points(s0.xi, pot.d).astype(float)
    n_steps = int(round(T / dt))

    p0 = float(pot.raw_value(x) + 0.5 * np.sum(xi**2))
    ts = [0.0]
    xs = [x.copy()]
    xis = [xi.copy()]
    force = -pot.raw_grad(x)
    x = x.copy()
    xi = xi.copy()
    for k in range(1, n_steps + 1):
        x += dt * xi + (0.5 * dt * dt) * force
        new_force = -pot.raw_grad(x)
        xi += (0.5 * dt) * (force + new_force)
        force = new_force
        if k % record_every == 0 or k == n_steps:
            ts.append(k * dt)
            xs.append(x.copy())
            xis.append(xi.copy())

    t = np.array(ts)
    xs = np.stack(xs)
    xis = np.stack(xis)
    p = pot.raw_value(xs) + 0.5 * np.sum(xis**2, axis=-1)
    drift = float(np.max(np.abs(p - p0)) / max(p0, 1.0))
    if drift > 100.0 * energy_drift_tol:
        raise RuntimeError("integrator unstable -- reduce dt")
    return Trajectory(t, xs, xis, p, dt=dt, p0=p0, drift=drift)


def flow_positions(
    pot: Potential,
    x0: np.ndarray,
    xi0: np.ndarray,
    times: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Positions of batched trajectories at the requested times.

    ``times`` must be an increasing grid containing 0 (both signs allowed);
    integration runs separately forward and backward from t = 0 with step
    refinement so the grid times are hit exactly.

    Returns an array of shape (n_times,) + x0.shape.
    """
    x0 = np.asarray(x0, dtype=float)
    xi0 = np.asarray(xi0, dtype=float)
    times = np.asarray(times, dtype=float)
    out = np.empty(times.shape + x0.shape)

    for sign in (1.0, -1.0):
        sel = np.nonzero(times * sign >= 0.0)[0]
        if sel.size == 0:
            continue
        t_leg = np.abs(times[sel])
        order = np.argsort(t_leg)
        x = x0.copy()
        xi = sign * xi0
        t_cur = 0.0
        for j in order:
            target = t_leg[j]
            span = target - t_cur
            if span > 1e-15:
                n = max(1, int(np.ceil(span / dt)))
                x, xi = _verlet(pot, x, xi, n, span / n)
                t_cur = target
            out[sel[j]] = x
    return out


def rescaled_flow(
    pot: Potential,
    y: np.ndarray,
    eta: np.ndarray,
    s: float,
    lam: float,
    dt: float | None = None,
) -> PhaseState:
    """Slow-time flow at frequency lam: returns (x^(s/lam), xi^(s/lam)/lam).

    The initial condition (y, eta) must sit on the rescaled shell
    V(y) + lam^2 |eta|^2 / 2 = lam^2 to within 1e-9 relative.
    """
    y = as_points(y, pot.d).astype(float)
    eta = as_points(eta, pot.d).astype(float)
    if dt is None:
        dt = default_dt(lam)
    p = pot.raw_value(y) + 0.5 * lam**2 * np.sum(eta**2, axis=-1)
    if np.max(np.abs(p - lam**2)) > 1e-9 * lam**2:
        raise ValueError("initial state is not on the rescaled energy shell")

    t_final = s / lam
    if abs(t_final) < 1e-15:
        return PhaseState(y, eta)
    n = max(1, int(np.ceil(abs(t_final) / dt)))
    sign = 1.0 if t_final > 0 else -1.0
    x, xi = _verlet(pot, y, sign * lam * eta, n, abs(t_final) / n)
    return PhaseState(x, sign * xi / lam)


@dataclass(frozen=True)
class LinearizationReport:
    """Measured drift of the rescaled flow from its straight-line shadow."""

    dev_eta: np.ndarray
    dev_y: np.ndarray
    bound_eta: float
    bound_y: float
    eta_ok: np.ndarray
    y_ok: np.ndarray


def linearization_deviation(
    pot: Potential,
    y: np.ndarray,
    eta: np.ndarray,
    T: float,
    lam: float,
    eps_profile: EpsilonProfile,
    *,
    dt: float | None = None,
    n_times: int = 65,
) -> LinearizationReport:
    """Compare the rescaled flow against straight-line motion over |s| <= T.

    dev_eta = sup_s |eta_s - eta|   checked against (T  / sqrt(lam)) eps(lam)
    dev_y   = sup_s |y_s - y - s*eta| checked against (T^2 / sqrt(lam)) eps(lam)

    Batched: y, eta may be (d,) or (n, d); deviations come back per sample.
    """
    y = np.atleast_2d(as_points(y, pot.d).astype(float))
    eta = np.atleast_2d(as_points(eta, pot.d).astype(float))
    if dt is None:
        dt = default_dt(lam)

    s_grid = np.linspace(-T, T, n_times)
    times = s_grid / lam

    dev_eta = np.zeros(y.shape[0])
    dev_y = np.zeros(y.shape[0])
    for sign in (1.0, -1.0):
        sel = np.nonzero(s_grid * sign >= 0.0)[0]
        t_leg = np.abs(times[sel])
        order = np.argsort(t_leg)
        x = y.copy()
        xi = sign * lam * eta
        t_cur = 0.0
        for j in order:
            span = t_leg[j] - t_cur
            if span > 1e-15:
                n = max(1, int(np.ceil(span / dt)))
                x, xi = _verlet(pot, x, xi, n, span / n)
                t_cur = t_leg[j]
            s = s_grid[sel[j]]
            de = np.linalg.norm(sign * xi / lam - eta, axis=-1)
            dy = np.linalg.norm(x - (y + s * eta), axis=-1)
            dev_eta = np.maximum(dev_eta, de)
            dev_y = np.maximum(dev_y, dy)

    eps = float(eps_profile.at(lam))
    bound_eta = T / np.sqrt(lam) * eps
    bound_y = T**2 / np.sqrt(lam) * eps
    return LinearizationReport(
        dev_eta=dev_eta,
        dev_y=dev_y,
        bound_eta=bound_eta,
        bound_y=bound_y,
        eta_ok=dev_eta <= bound_eta,
        y_ok=dev_y <= bound_y,
    )


def sample_shell(
    pot: Potential,
    lam: float,
    n: int,
    rng: np.random.Generator,
    *,
    turning_fraction: float = 0.0,
):
    """Draw n points on the energy shell {V(x) + |xi|^2/2 = lam^2}.

    Positions are uniform in the sublevel set {V <= lam^2} by rejection in the
    bounding box, momenta uniform on the sphere of radius sqrt(2(lam^2 - V)).
    A ``turning_fraction`` of the samples is forced to |xi| <= 0.1*lam by
    solving for the position radius along a random direction instead; those
    samples probe the neighborhood of the turning surface.
    """
    d = pot.d
    box = sublevel_radius(pot, lam**2)
    n_turn = int(round(turning_fraction * n))
    n_free = n - n_turn

    xs = np.empty((n, d))
    xis = np.empty((n, d))

    got = 0
    while got < n_free:
        cand = rng.uniform(-box, box, size=(max(2 * (n_free - got), 16), d))
        keep = cand[pot.raw_value(cand) <= lam**2]
        take = min(len(keep), n_free - got)
        xs[got : got + take] = keep[:take]
        got += take
    kinetic = 2.0 * (lam**2 - pot.raw_value(xs[:n_free]))
    kinetic = np.maximum(kinetic, 0.0)
    dirs = _random_directions(d, n_free, rng)
    xis[:n_free] = np.sqrt(kinetic)[:, None] * dirs

    for k in range(n_turn):
        u = rng.uniform()
        speed = (u * u) * 0.1 * lam  # biased toward true turning points
        v_target = lam**2 - 0.5 * speed**2
        direction = _random_directions(d, 1, rng)[0]
        radius = _radius_at_level(pot, direction, v_target)
        xs[n_free + k] = radius * direction
        xis[n_free + k] = speed * _random_directions(d, 1, rng)[0]
    return xs, xis


def _random_directions(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if d == 1:
        return rng.choice([-1.0, 1.0], size=(n, 1))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def _radius_at_level(pot: Potential, direction: np.ndarray, level: float) -> float:
    """Radius r with V(r * direction) = level along a fixed ray."""
    hi = max(pot.a0, 1.0)
    while float(pot.raw_value(hi * direction)) < level:
        hi *= 2.0
        if hi > 1e10:
            raise RuntimeError("direction does not reach the requested level")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(pot.raw_value(mid * direction)) < level:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def trajectory_to_csv(traj: Trajectory, path, d: int) -> None:
    """Write t, x_1..x_d, xi_1..xi_d, p rows for a single-state trajectory."""
    import csv

    x = traj.x.reshape(len(traj.t), d)
    xi = traj.xi.reshape(len(traj.t), d)
    p = traj.p.reshape(len(traj.t))
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["t"] + [f"x_{i+1}" for i in range(d)] + [f"xi_{i+1}" for i in range(d)] + ["p"]
        writer.writerow(header)
        for k, t in enumerate(traj.t):
            row = [repr(float(t))]
            row += [repr(float(v)) for v in x[k]]
            row += [repr(float(v)) for v in xi[k]]
            row.append(repr(float(p[k])))
            writer.writerow(row)
