"""Confining potentials and the growth quantities derived from them.

A potential here is a smooth function V >= 0 on R^d that grows at infinity
slower than |x|^4 (strict sub-quarticity).  Everything downstream -- classical
flow, damping-condition scans, localized quasimode constructions -- consumes
potentials through this module's `Potential` handle, which bundles a batched
evaluator, its gradient, and the radius beyond which V >= 1.

Two derived quantities live here because they only depend on V:

* ``epsilon_lambda``: the frequency-dependent smallness factor

      eps(lam) = C_V * min_A ( sup_{|x|<=A} |grad V| / lam^(3/2)
                               + sup_{|x|>=A} |grad V| / V^(3/4) )

  which is non-increasing in lam and tends to 0 exactly because V is
  sub-quartic.  It calibrates how far the rescaled classical flow can drift
  from a straight line, and how large localized bumps may be taken.
* ``sublevel_radius``: the smallest radius outside of which V clears a level,
  used to truncate computational domains.

Suprema over balls and annuli are estimated by sampling radial rays; this is
exact for radial potentials and adequate for the mildly anisotropic builtins.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

__all__ = [
    "Potential",
    "EpsilonProfile",
    "builtin_potential",
    "epsilon_lambda",
    "sublevel_radius",
    "check_gradient",
]


def as_points(x, d: int) -> np.ndarray:
    """Coerce input to an array of points with trailing axis of length d."""
    arr = np.asarray(x, dtype=float)
    if d == 1 and (arr.ndim == 0 or arr.shape[-1] != 1):
        arr = arr[..., np.newaxis]
    if arr.shape[-1] != d:
        raise ValueError(f"expected points with last axis {d}, got shape {arr.shape}")
    return arr


def unit_directions(d: int, n: int) -> np.ndarray:
    """A deterministic set of unit vectors; both signs in 1D, a fan in 2D."""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        angles = 2.0 * np.pi * np.arange(n) / n
        return np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    raise ValueError("only dimensions 1 and 2 are supported")


@dataclass(frozen=True)
class Potential:
    """A confining potential with batched value and gradient evaluators.

    ``raw_value``/``raw_grad`` act on arrays of shape (..., d).  ``a0`` is a
    radius with V(x) >= 1 whenever |x| >= a0.
    """

    d: int
    raw_value: Callable[[np.ndarray], np.ndarray]
    raw_grad: Callable[[np.ndarray], np.ndarray]
    label: str
    a0: float

    def value(self, x) -> np.ndarray:
        return self.raw_value(as_points(x, self.d))

    def grad(self, x) -> np.ndarray:
        return self.raw_grad(as_points(x, self.d))

    def grad_norm(self, x) -> np.ndarray:
        return np.linalg.norm(self.grad(x), axis=-1)


def builtin_potential(name: str, d: int = 1, **params) -> Potential:
    """Construct one of the builtin confining potentials.

    harmonic       V(x) = |x|^2 / 2
    power          V(x) = (1 + |x|^2)^(s/2) - 1, with 0 < s < 4
    anisotropic    V(x) = sum_i w_i^2 x_i^2 / 2, with positive weights
    """
    if d not in (1, 2):
        raise ValueError("only dimensions 1 and 2 are supported")

    if name == "harmonic":
        if params:
            raise ValueError(f"harmonic potential takes no parameters, got {sorted(params)}")

        def value(pts):
            return 0.5 * np.sum(pts * pts, axis=-1)

        def grad(pts):
            return pts.copy()

        return Potential(d, value, grad, "harmonic", a0=np.sqrt(2.0))

    if name == "power":
        s = float(params.pop("s"))
        if params:
            raise ValueError(f"unknown power-potential parameters {sorted(params)}")
        if not 0.0 < s < 4.0:
            raise ValueError(f"exponent s={s} violates strict sub-quarticity (need 0 < s < 4)")

        def value(pts, s=s):
            q = 1.0 + np.sum(pts * pts, axis=-1)
            return q ** (s / 2.0) - 1.0

        def grad(pts, s=s):
            q = 1.0 + np.sum(pts * pts, axis=-1)
            return s * pts * q[..., np.newaxis] ** (s / 2.0 - 1.0)

        # V >= 1 once (1 + r^2)^(s/2) >= 2
        a0 = np.sqrt(2.0 ** (2.0 / s) - 1.0)
        return Potential(d, value, grad, f"power(s={s:g})", a0=a0)

    if name == "anisotropic":
        weights = np.asarray(params.pop("weights", [1.0, 2.0][:d]), dtype=float)
        if params:
            raise ValueError(f"unknown anisotropic-potential parameters {sorted(params)}")
        if weights.shape != (d,) or np.any(weights <= 0.0):
            raise ValueError("anisotropic potential needs one positive weight per axis")
        w2 = weights**2

        def value(pts, w2=w2):
            return 0.5 * np.sum(w2 * pts * pts, axis=-1)

        def grad(pts, w2=w2):
            return w2 * pts

        a0 = np.sqrt(2.0) / weights.min()
        label = "anisotropic(" + ",".join(f"{w:g}" for w in weights) + ")"
        return Potential(d, value, grad, label, a0=a0)

    raise ValueError(f"unknown potential {name!r}")


def check_gradient(pot: Potential, points, step: float = 1e-5, rtol: float = 1e-6) -> float:
    """Max relative error of the gradient against central finite differences."""
    pts = as_points(points, pot.d)
    grad = pot.raw_grad(pts)
    fd = np.empty_like(grad)
    for i in range(pot.d):
        e = np.zeros(pot.d)
        e[i] = step
        fd[..., i] = (pot.raw_value(pts + e) - pot.raw_value(pts - e)) / (2.0 * step)
    scale = np.maximum(np.linalg.norm(grad, axis=-1), 1.0)
    err = np.max(np.linalg.norm(grad - fd, axis=-1) / scale)
    if err > rtol:
        raise ValueError(f"gradient inconsistent with finite differences: rel err {err:.3e}")
    return float(err)


@dataclass(frozen=True)
class EpsilonProfile:
    """Sampled profile of the smallness factor eps(lam).

    Values are non-increasing in lam (enforced by a running minimum) and
    strictly positive.  ``c_v`` is the prefactor (2^(1/4) + C)^3 built from the
    sampled supremum C of |grad V| / (4 (1 + V)^(3/4)).
    """

    lambdas: np.ndarray
    values: np.ndarray
    c_v: float
    a0: float
    trial_radii: list = field(repr=False)

    def at(self, lam) -> np.ndarray:
        """Interpolated eps at arbitrary frequencies (clamped at the ends)."""
        lam = np.asarray(lam, dtype=float)
        return np.interp(lam, self.lambdas, self.values)


def _radial_supremum_tables(pot: Potential, r_tail: float, n_dirs: int, n_dense: int):
    """Tables of sup_{|x|<=A}|grad V| and sup_{|x|>=A}|grad V|/V^(3/4).

    Sampled on a single dense radial grid shared by all trial radii A; the
    tail table assumes the ratio does not peak beyond ``r_tail`` (true for
    sub-quartic growth at these scales).
    """
    dirs = unit_directions(pot.d, n_dirs)
    radii = np.concatenate([[0.0], np.geomspace(1e-3, r_tail, n_dense)])
    pts = radii[:, None, None] * dirs[None, :, :]
    gnorm = np.linalg.norm(pot.raw_grad(pts), axis=-1)
    vals = pot.raw_value(pts)

    g_by_radius = gnorm.max(axis=1)
    sup_inside = np.maximum.accumulate(g_by_radius)

    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(vals > 0.0, gnorm / np.maximum(vals, 1e-300) ** 0.75, 0.0)
    ratio_by_radius = ratio.max(axis=1)
    sup_tail = np.maximum.accumulate(ratio_by_radius[::-1])[::-1]
    return radii, sup_inside, sup_tail


def _gradient_growth_constant(pot: Potential, n_dirs: int) -> float:
    """Sampled supremum of |grad V| / (4 (1 + V)^(3/4)) over [-1e3, 1e3]^d."""
    dirs = unit_directions(pot.d, n_dirs)
    radii = np.concatenate([[0.0], np.geomspace(1e-3, 1e3, 512)])

    def ratio_max(rs):
        pts = rs[:, None, None] * dirs[None, :, :]
        g = np.linalg.norm(pot.raw_grad(pts), axis=-1)
        v = pot.raw_value(pts)
        return (g / (4.0 * (1.0 + v) ** 0.75)).max(axis=1)

    vals = ratio_max(radii)
    best = int(np.argmax(vals))
    # two refinement rounds around the coarse argmax
    for _ in range(2):
        lo = radii[max(best - 1, 0)]
        hi = radii[min(best + 1, len(radii) - 1)]
        if hi <= lo:
            break
        radii = np.linspace(lo, hi, 256)
        vals = ratio_max(radii)
        best = int(np.argmax(vals))
    return float(vals[best])


def epsilon_lambda(
    pot: Potential,
    lambdas,
    *,
    n_trial: int = 64,
    n_dirs: int | None = None,
    n_dense: int = 2048,
) -> EpsilonProfile:
    """Sample the smallness factor eps(lam) on a frequency grid.

    For each lam the trial radius A ranges over [a0, max(a0, lam)] and the
    bracketed minimum is taken over a log-spaced grid of ``n_trial`` radii.
    A running minimum over ascending lam enforces monotonicity, which the
    exact quantity satisfies but sampled suprema may jitter away from.
    """
    lams = np.sort(np.atleast_1d(np.asarray(lambdas, dtype=float)))
    if lams.size == 0:
        raise ValueError("need at least one frequency")
    if lams[0] < 1.0:
        raise ValueError("frequencies must satisfy lam >= 1")

    if n_dirs is None:
        n_dirs = 64 * pot.d
    c = _gradient_growth_constant(pot, n_dirs)
    c_v = (2.0**0.25 + c) ** 3

    a_max_global = max(pot.a0, lams[-1])
    radii, sup_inside, sup_tail = _radial_supremum_tables(
        pot, r_tail=4.0 * a_max_global, n_dirs=n_dirs, n_dense=n_dense
    )

    values = np.empty_like(lams)
    trial_radii: list[np.ndarray] = []
    for i, lam in enumerate(lams):
        a_grid = np.geomspace(pot.a0, max(pot.a0, lam), n_trial)
        idx = np.searchsorted(radii, a_grid)
        idx = np.clip(idx, 1, len(radii) - 1)
        inner = sup_inside[idx] / lam**1.5
        outer = sup_tail[idx]
        values[i] = c_v * np.min(inner + outer)
        trial_radii.append(a_grid)

    values = np.minimum.accumulate(values)
    if np.any(values <= 0.0):
        raise ValueError("sampled eps(lam) is not strictly positive")
    return EpsilonProfile(lams, values, c_v=float(c_v), a0=pot.a0, trial_radii=trial_radii)


def sublevel_radius(pot: Potential, level: float, *, n_dirs: int | None = None) -> float:
    """Smallest radius rho with V(x) >= level whenever |x| >= rho.

    Works on the sampled radial minimum of V and bisects it against the
    level; errors out if the potential never clears the level on the search
    range (non-confining sampling) or if the level is not positive.
    """
    if level <= 0.0:
        raise ValueError("level too small")
    if n_dirs is None:
        n_dirs = 64 * pot.d
    dirs = unit_directions(pot.d, n_dirs)

    def radial_min(rho: float) -> float:
        return float(pot.raw_value(rho * dirs).min())

    if radial_min(0.0) >= level:
        return 0.0

    hi = max(pot.a0, 1.0)
    while radial_min(hi) < level:
        hi *= 2.0
        if hi > 1e8:
            raise ValueError("potential does not clear the level on the search range")
    # verify the sampled radial minimum stays above the level beyond the bracket
    probe = np.geomspace(hi, 4.0 * hi, 32)
    if any(radial_min(r) < level for r in probe):
        raise ValueError("non-monotone radial sampling: potential dips below the level")

    rho = brentq(lambda r: radial_min(r) - level, 0.0, hi, xtol=1e-12, rtol=1e-15)
    return float(rho)
