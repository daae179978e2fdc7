"""Command-line front end: JSON configs in, deterministic CSV/JSON artifacts out.

Every command validates its whole config before computing anything, writes the
module-defined artifacts into --out, and finishes with a manifest recording
the config hash, seed, library versions, and wall time.  Exit codes: 0 on
success, 2 when a precondition or the config is invalid, 3 when a numerical
stage fails.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .damping import (
    builtin_damping,
    dsc_limit_scan,
    dsc_scan,
    report_to_csv,
    report_to_json,
    tpc_scan,
    ugcc_scan,
)
from .dynamics import PhaseState, flow_integrate, trajectory_to_csv
from .evolution import (
    WaveState,
    cfl_limit,
    damped_spectrum_1d,
    decay_fit,
    energy_balance_defect,
    evolve,
    quasimode_probe,
    resolvent_grid,
    resolvent_scan,
    resolvent_to_csv,
    spectrum_to_csv,
    trace_to_csv,
)
from .fields import Field, field_to_csv, make_grid
from .potentials import builtin_potential
from .quasimodes import (
    kinetic_wavepacket,
    packet_grid,
    packet_spec,
    tpc_violation_sequence,
    turning_point_bump,
)

log = logging.getLogger("stabscope")

COMMANDS = (
    "flow",
    "conditions",
    "dsc-limit",
    "quasimode",
    "kinetic-sequence",
    "tpc-witness",
    "evolve",
    "probe",
    "resolvent",
    "spectrum",
    "suite",
)

_LOG_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}

_MISSING = object()


class _Section:
    """Pop-only view of one JSON object; leftover keys are a config error."""

    def __init__(self, name: str, data):
        if not isinstance(data, dict):
            raise ValueError(f"config section {name!r} must be a JSON object")
        self.name = name
        self.data = dict(data)

    def take(self, key: str, default=_MISSING):
        if key in self.data:
            return self.data.pop(key)
        if default is _MISSING:
            raise ValueError(f"missing config key {key!r} in {self.name}")
        return default

    def sub(self, key: str) -> "_Section":
        return _Section(f"{self.name}.{key}", self.take(key, {}))

    def done(self) -> None:
        if self.data:
            raise ValueError(f"unknown config keys in {self.name}: {sorted(self.data)}")


def _build_potential(sec: _Section):
    name = str(sec.take("name", "harmonic"))
    d = int(sec.take("d", 1))
    kwargs = {}
    if name == "power":
        kwargs["s"] = float(sec.take("s_exponent"))
    elif name == "anisotropic" and "weights" in sec.data:
        kwargs["weights"] = [float(w) for w in sec.take("weights")]
    sec.done()
    return builtin_potential(name, d=d, **kwargs)


def _build_damping(sec: _Section, d: int):
    name = str(sec.take("name"))
    kwargs = {"amplitude": float(sec.take("amplitude", 1.0))}
    if name in ("exterior", "ball"):
        kwargs["radius"] = float(sec.take("radius_space", 1.0))
    if name == "ball" and "center_space" in sec.data:
        kwargs["center"] = [float(c) for c in sec.take("center_space")]
    if name in ("checkerboard", "radial_shells", "strip_lattice"):
        kwargs["period"] = float(sec.take("period_space", 1.0))
        kwargs["duty"] = float(sec.take("duty", 0.5))
    sec.done()
    return builtin_damping(name, d=d, **kwargs)


def _build_grid(sec: _Section, d: int):
    n = sec.take("n_nodes")
    half = sec.take("half_width_space")
    center = sec.take("center_space", None)
    sec.done()
    ns = [int(v) for v in n] if isinstance(n, list) else int(n)
    ls = [float(v) for v in half] if isinstance(half, list) else float(half)
    return make_grid(d, ns, ls, center=center)


def _fmt(x) -> str:
    return repr(float(x))


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fit_dict(fit) -> dict:
    return {
        "C": fit.C,
        "tau": fit.tau if math.isfinite(fit.tau) else None,
        "rms": fit.rms,
        "window": [float(fit.window[0]), float(fit.window[1])],
        "flags": list(fit.flags),
    }


# ---------------------------------------------------------------------------
# commands


def _cmd_flow(cfg: _Section, out: Path, opts) -> list:
    pot = _build_potential(cfg.sub("potential"))
    x0 = np.asarray(cfg.take("x0_space"), dtype=float)
    xi0 = np.asarray(cfg.take("xi0_momentum"), dtype=float)
    T = float(cfg.take("T_time", 10.0))
    dt = float(cfg.take("dt_time", 1e-3))
    record = int(cfg.take("record_every", 1))
    cfg.done()
    traj = flow_integrate(pot, PhaseState(x0, xi0), T, dt, record_every=record)
    log.info("flow: %d samples, drift %.3e", len(traj.t), traj.drift)
    trajectory_to_csv(traj, out / "trajectory.csv", pot.d)
    _write_json(out / "flow.json", {"drift": traj.drift, "p0": traj.p0, "dt_time": traj.dt})
    return ["trajectory.csv", "flow.json"]


_CONDITION_DEFAULTS = {
    "ugcc": {"T_time": 2.0, "r_space": 0.25},
    "tpc": {"R_space": 1.0, "shells_space": [4.0, 9.0, 36.0]},
    "dsc": {
        "T_time": 2.0,
        "R_space": 1.0,
        "lambdas_freq": [25.0, 100.0, 400.0],
        "n_shell_samples": 256,
    },
}


def _condition_params(cfg: _Section) -> dict:
    params = {}
    for check, defaults in _CONDITION_DEFAULTS.items():
        sec = cfg.sub(check)
        params[check] = {key: sec.take(key, value) for key, value in defaults.items()}
        sec.done()
    return params


def _run_conditions(pot, b, params: dict, checks, seed: int, threads: int) -> dict:
    reports = {}
    if "ugcc" in checks:
        p = params["ugcc"]
        reports["ugcc"] = ugcc_scan(b, float(p["T_time"]), float(p["r_space"]))
    if "tpc" in checks:
        p = params["tpc"]
        reports["tpc"] = tpc_scan(b, pot, float(p["R_space"]), [float(s) for s in p["shells_space"]])
    if "dsc" in checks:
        p = params["dsc"]
        reports["dsc"] = dsc_scan(
            b,
            pot,
            float(p["T_time"]),
            float(p["R_space"]),
            [float(v) for v in p["lambdas_freq"]],
            n_shell_samples=int(p["n_shell_samples"]),
            seed=seed,
            threads=threads,
        )
    return reports


def _cmd_conditions(cfg: _Section, out: Path, opts) -> list:
    pot = _build_potential(cfg.sub("potential"))
    b = _build_damping(cfg.sub("damping"), pot.d)
    checks = [str(c) for c in cfg.take("checks", ["ugcc", "tpc", "dsc"])]
    unknown = sorted(set(checks) - set(_CONDITION_DEFAULTS))
    if unknown:
        raise ValueError(f"unknown condition checks {unknown}")
    params = _condition_params(cfg)
    cfg.done()

    reports = _run_conditions(pot, b, params, checks, opts.seed, opts.threads)
    artifacts = []
    summary = {}
    for check, rep in reports.items():
        log.info("%s: infimum %.6g, passed=%s", rep.condition, rep.infimum, rep.passed)
        report_to_csv(rep, out / f"conditions_{check}.csv")
        report_to_json(rep, out / f"conditions_{check}.json")
        artifacts += [f"conditions_{check}.csv", f"conditions_{check}.json"]
        summary[rep.condition] = {
            "infimum": rep.infimum,
            "threshold": rep.threshold,
            "passed": rep.passed,
        }
    _write_json(out / "conditions_summary.json", summary)
    return artifacts + ["conditions_summary.json"]


def _cmd_dsc_limit(cfg: _Section, out: Path, opts) -> list:
    pot = _build_potential(cfg.sub("potential"))
    b = _build_damping(cfg.sub("damping"), pot.d)
    ladder = cfg.take("tr_ladder")
    if not isinstance(ladder, list) or not ladder:
        raise ValueError("tr_ladder must be a non-empty list of {T_time, R_space} entries")
    tr_grid = []
    for k, entry in enumerate(ladder):
        sec = _Section(f"config.tr_ladder[{k}]", entry)
        tr_grid.append((float(sec.take("T_time")), float(sec.take("R_space"))))
        sec.done()
    lambdas = [float(v) for v in cfg.take("lambdas_freq", [25.0, 100.0, 400.0])]
    n_samples = int(cfg.take("n_shell_samples", 256))
    cfg.done()

    rep = dsc_limit_scan(
        b, pot, tr_grid, lambdas, n_shell_samples=n_samples, seed=opts.seed, threads=opts.threads
    )
    log.info("dsc-limit: proxy at largest (T, R) = %.6g", rep.infimum)
    report_to_csv(rep, out / "dsc_limit.csv")
    report_to_json(rep, out / "dsc_limit.json")
    return ["dsc_limit.csv", "dsc_limit.json"]


def _cmd_quasimode(cfg: _Section, out: Path, opts) -> list:
    pot = _build_potential(cfg.sub("potential"))
    damping = None
    if "damping" in cfg.data:
        damping = _build_damping(cfg.sub("damping"), pot.d)
    x0 = np.asarray(cfg.take("x0_space"), dtype=float)
    R = float(cfg.take("R_width"))
    grid = None
    if "grid" in cfg.data:
        grid = _build_grid(cfg.sub("grid"), pot.d)
    cfg.done()

    f, rep = turning_point_bump(pot, x0, R, grid=grid, b=damping)
    log.info("quasimode: lam %.4f, residual ratio %.4f", rep.lam, rep.residual_ratio)
    field_to_csv(f, out / "mode.csv")
    _write_json(out / "quasimode.json", rep.to_json_dict())
    return ["mode.csv", "quasimode.json"]


def _cmd_kinetic(cfg: _Section, out: Path, opts) -> list:
    pot = _build_potential(cfg.sub("potential"))
    damping = None
    if "damping" in cfg.data:
        damping = _build_damping(cfg.sub("damping"), pot.d)
    n_list = [int(n) for n in cfg.take("n_list", [4, 6, 8])]
    nu = cfg.take("direction", None)
    x_n = cfg.take("x0_space", None)
    t_n = float(cfg.take("t_width_space", 2.0))
    r_n = float(cfg.take("r_width_space", 0.5))
    ppw = int(cfg.take("ppw_nodes", 32))
    cfg.done()

    reports = []
    for n in n_list:
        spec = packet_spec(
            pot,
            n,
            nu=None if nu is None else np.asarray(nu, dtype=float),
            x_n=None if x_n is None else np.asarray(x_n, dtype=float),
            t_n=t_n,
            r_n=r_n,
        )
        _, rep = kinetic_wavepacket(pot, spec, grid=packet_grid(spec, ppw=ppw), b=damping)
        rep.details["n"] = n
        log.info("kinetic n=%d: lam %.4f, residual ratio %.4f", n, rep.lam, rep.residual_ratio)
        reports.append(rep)

    with open(out / "kinetic_sequence.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("n,lam,residual_ratio,damping_pairing\n")
        for rep in reports:
            pairing = "" if rep.damping_pairing is None else _fmt(rep.damping_pairing)
            fh.write(f"{rep.details['n']},{_fmt(rep.lam)},{_fmt(rep.residual_ratio)},{pairing}\n")
    _write_json(out / "kinetic_sequence.json", [rep.to_json_dict() for rep in reports])
    return ["kinetic_sequence.csv", "kinetic_sequence.json"]


def _cmd_tpc_witness(cfg: _Section, out: Path, opts) -> list:
    pot = _build_potential(cfg.sub("potential"))
    b = _build_damping(cfg.sub("damping"), pot.d)
    n_max = int(cfg.take("n_max", 6))
    cfg.done()

    reports = tpc_violation_sequence(pot, b, n_max)
    with open(out / "tpc_witness.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("n,lam,ball_average,threshold,damping_pairing,residual_ratio\n")
        for rep in reports:
            d = rep.details
            fh.write(
                f"{d['n']},{_fmt(rep.lam)},{_fmt(d['ball_average'])},{_fmt(d['threshold'])},"
                f"{_fmt(rep.damping_pairing)},{_fmt(rep.residual_ratio)}\n"
            )
    _write_json(out / "tpc_witness.json", [rep.to_json_dict() for rep in reports])
    return ["tpc_witness.csv", "tpc_witness.json"]


def _initial_state(grid, sec: _Section) -> WaveState:
    kind = str(sec.take("kind", "gaussian"))
    if kind != "gaussian":
        raise ValueError(f"unknown initial data kind {kind!r}")
    center = np.asarray(sec.take("center_space", [0.0] * grid.d), dtype=float)
    width = float(sec.take("width_space", 1.0))
    sec.done()
    if width <= 0.0:
        raise ValueError("initial width_space must be positive")
    pts = grid.meshgrid()
    u0 = np.exp(-np.sum((pts - center) ** 2, axis=-1) / (2.0 * width * width))
    return WaveState(
        Field(grid, u0.astype(complex)),
        Field(grid, np.zeros(grid.ns, dtype=complex)),
        0.0,
    )


def _cmd_evolve(cfg: _Section, out: Path, opts) -> list:
    pot = _build_potential(cfg.sub("potential"))
    b = _build_damping(cfg.sub("damping"), pot.d)
    grid = _build_grid(cfg.sub("grid"), pot.d)
    state = _initial_state(grid, cfg.sub("initial"))
    T = float(cfg.take("T_time"))
    dt = cfg.take("dt_time", None)
    record = int(cfg.take("record_every", 1))
    cfg.done()

    dt = 0.5 * cfl_limit(pot, grid) if dt is None else float(dt)
    trace = evolve(pot, b, state, T, dt, record_every=record)
    fit = decay_fit(trace)
    log.info(
        "evolve: %d samples, balance coefficient %.3e", len(trace.t), trace.balance_coefficient
    )
    trace_to_csv(trace, out / "trace.csv")
    _write_json(
        out / "evolve.json",
        {
            "dt_time": trace.dt,
            "balance_coefficient": trace.balance_coefficient,
            "balance_defect": energy_balance_defect(trace),
            "fit": _fit_dict(fit),
        },
    )
    return ["trace.csv", "evolve.json"]


def _cmd_probe(cfg: _Section, out: Path, opts) -> list:
    pot = _build_potential(cfg.sub("potential"))
    b = _build_damping(cfg.sub("damping"), pot.d)
    x0 = np.asarray(cfg.take("x0_space"), dtype=float)
    R = float(cfg.take("R_width"))
    grid = _build_grid(cfg.sub("grid"), pot.d)
    T = float(cfg.take("T_time"))
    dt = cfg.take("dt_time", None)
    cfg.done()

    f, rep = turning_point_bump(pot, x0, R, grid=grid, b=b)
    trace, fit = quasimode_probe(pot, b, f, rep.lam, T, dt=None if dt is None else float(dt))
    log.info("probe: lam %.4f, tau %s", rep.lam, fit.tau)
    trace_to_csv(trace, out / "probe_trace.csv")
    _write_json(out / "probe.json", {"fit": _fit_dict(fit), "quasimode": rep.to_json_dict()})
    return ["probe_trace.csv", "probe.json"]


def _resolvent_lambdas(cfg: _Section) -> np.ndarray:
    lams = cfg.take("lambdas_freq", None)
    n_max = cfg.take("n_max", None)
    if (lams is None) == (n_max is None):
        raise ValueError("give exactly one of lambdas_freq or n_max")
    if lams is not None:
        return np.asarray([float(v) for v in lams])
    return np.sqrt(np.arange(int(n_max) + 1) + 0.5)


def _cmd_resolvent(cfg: _Section, out: Path, opts) -> list:
    pot = _build_potential(cfg.sub("potential"))
    if pot.d != 1:
        raise ValueError("resolvent scan requires d = 1")
    b = _build_damping(cfg.sub("damping"), pot.d)
    lams = _resolvent_lambdas(cfg)
    grid = None
    if "grid" in cfg.data:
        grid = _build_grid(cfg.sub("grid"), pot.d)
    cfg.done()

    scan = resolvent_scan(pot, b, lams, grid, threads=opts.threads)
    log.info("resolvent: max ratio %.4g", float(np.max(scan.ratio)))
    resolvent_to_csv(scan, out / "resolvent.csv")
    return ["resolvent.csv"]


def _cmd_spectrum(cfg: _Section, out: Path, opts) -> list:
    pot = _build_potential(cfg.sub("potential"))
    if pot.d != 1:
        raise ValueError("damped spectrum requires d = 1")
    b = _build_damping(cfg.sub("damping"), pot.d)
    count = int(cfg.take("count", 40))
    if "grid" in cfg.data:
        grid = _build_grid(cfg.sub("grid"), pot.d)
    else:
        grid = resolvent_grid(pot, math.sqrt(count + 0.5))
    cfg.done()

    result = damped_spectrum_1d(pot, b, grid, count)
    log.info("spectrum: abscissa %.6f", result.abscissa)
    spectrum_to_csv(result, out / "spectrum.csv")
    _write_json(
        out / "spectrum.json",
        {"abscissa": result.abscissa, "count": len(result.values), "flags": sorted(set(result.flags))},
    )
    return ["spectrum.csv", "spectrum.json"]


CANONICAL_PAIRS = (
    ("constant", {}),
    ("exterior", {"radius_space": 1.0}),
    ("ball", {"radius_space": 1.0}),
    ("checkerboard", {"period_space": 1.0, "duty": 0.5}),
)


def _cmd_suite(cfg: _Section, out: Path, opts) -> list:
    params = _condition_params(cfg)
    cfg.done()
    pot = builtin_potential("harmonic", d=2)

    artifacts = []
    matrix = {}
    rows = []
    for label, spec in CANONICAL_PAIRS:
        b = _build_damping(_Section(label, {"name": label, **spec}), 2)
        reports = _run_conditions(pot, b, params, ("ugcc", "tpc", "dsc"), opts.seed, opts.threads)
        matrix[label] = {}
        for check, rep in reports.items():
            log.info("suite %s %s: passed=%s", label, rep.condition, rep.passed)
            name = f"conditions_{label}_{check}.csv"
            report_to_csv(rep, out / name)
            artifacts.append(name)
            matrix[label][rep.condition] = rep.passed
            rows.append((label, rep.condition, rep.infimum, rep.threshold, rep.passed))

    with open(out / "suite_matrix.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("pair,condition,infimum,threshold,passed\n")
        for label, cond, inf, thr, passed in rows:
            fh.write(f"{label},{cond},{_fmt(inf)},{_fmt(thr)},{str(passed).lower()}\n")
    _write_json(out / "suite_matrix.json", matrix)
    return artifacts + ["suite_matrix.csv", "suite_matrix.json"]


_DISPATCH = {
    "flow": _cmd_flow,
    "conditions": _cmd_conditions,
    "dsc-limit": _cmd_dsc_limit,
    "quasimode": _cmd_quasimode,
    "kinetic-sequence": _cmd_kinetic,
    "tpc-witness": _cmd_tpc_witness,
    "evolve": _cmd_evolve,
    "probe": _cmd_probe,
    "resolvent": _cmd_resolvent,
    "spectrum": _cmd_spectrum,
    "suite": _cmd_suite,
}


def _write_manifest(out: Path, command: str, config_bytes: bytes, opts, wall: float, artifacts) -> None:
    payload = {
        "command": command,
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "seed": opts.seed,
        "threads": opts.threads,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "stabscope": __version__,
        },
        "wall_time_s": wall,
        "artifacts": sorted(artifacts),
    }
    _write_json(out / "manifest.json", payload)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stabscope",
        description="Stabilization-condition experiments for damped waves with confinement.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, default=None, help="JSON experiment config")
    parser.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    opts = parser.parse_args(argv)

    level = _LOG_LEVELS.get(os.environ.get("STABSCOPE_LOG", "warning").strip().lower())
    logging.basicConfig(level=logging.WARNING if level is None else level)

    try:
        if opts.config is None:
            config_bytes = b"{}"
        else:
            try:
                config_bytes = opts.config.read_bytes()
            except OSError as exc:
                raise ValueError(f"config not readable: {exc}") from exc
        try:
            raw = json.loads(config_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"config is not valid JSON: {exc}") from exc
        if opts.threads < 1:
            raise ValueError("need threads >= 1")
        if opts.seed < 0:
            raise ValueError("need seed >= 0")

        opts.out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        artifacts = _DISPATCH[opts.command](_Section("config", raw), opts.out, opts)
        wall = time.perf_counter() - start
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3

    _write_manifest(opts.out, opts.command, config_bytes, opts, wall, artifacts)
    log.info("%s finished in %.2fs, %d artifacts", opts.command, wall, len(artifacts))
    return 0


if __name__ == "__main__":
    sys.exit(main())
