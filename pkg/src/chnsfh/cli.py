"""Command-line driver: ``chnsfh simulate | mms | demo``.

Outputs (all in ``--out``):

``config.json``       the validated configuration, seed included
``diagnostics.csv``   one row per step, columns :data:`DIAGNOSTIC_COLUMNS`
``fields_NNNNNN.vtk`` legacy structured-points VTK: cell ``phi``, ``mu``, ``p``
                      and the velocity interpolated to grid vertices
``fields_NNNNNN.csv`` the same fields at cell centres (velocity averaged)
``checkpoint.npz``    full two-level state for bit-exact restarts
``rates.csv``         convergence table (``mms`` mode), columns of
                      :data:`~chnsfh.verification.RATE_COLUMNS`

CSV files other than ``rates.csv`` start with a ``# seed=...`` comment line.
Exit status: 0 success, 2 bad configuration, 3 invariant breach
(positivity, mass, divergence), 4 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ChnsError, ConfigError, OutOfBounds, PositivityBreach
from .grid import BcMode, Grid, MacVelocity
from .scheme import CHNSIntegrator, SchemeParams, SimState, StepDiagnostics, state_monitors

log = logging.getLogger("chnsfh")

DIAGNOSTIC_COLUMNS = (
    "step", "time", "mass", "mass_drift", "phi_min", "phi_max", "energy", "div_inf",
    "outer_iters", "newton_iters", "damping_events",
)

EXIT_OK, EXIT_CONFIG, EXIT_BREACH, EXIT_SOLVER = 0, 2, 3, 4

MODES = ("simulate", "mms", "demo_spinodal")

# solver knobs that may be set from a config file
_SOLVER_KEYS = ("newton_tol", "newton_max", "outer_tol", "outer_max", "poisson_tol", "inner_tol")


@dataclass
class RunConfig:
    mode: str = "demo_spinodal"
    n: int = 64
    tau: float = 1e-3
    t_final: float = 2.0
    eps: float = 0.05
    theta0: float = 3.0
    gamma: float = 1.0
    nu: float = 1.0
    bc: str = "physical"
    beta0: float = 0.0
    amplitude: float = 0.05
    seed: int = 0
    init_file: Optional[str] = None
    out: str = "chnsfh_out"
    cadence: int = 100
    formats: tuple = ("csv",)
    levels: tuple = (4, 7)
    checkpoint_every: int = 0
    mass_tol: float = 1e-11
    div_tol: float = 1e-9
    energy_slack: float = 1e-8
    solver: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return int(round(self.t_final / self.tau))

    def scheme_params(self) -> SchemeParams:
        return SchemeParams(
            n=self.n, tau=self.tau, eps=self.eps, theta0=self.theta0, gamma=self.gamma,
            nu=self.nu, bc=BcMode(self.bc), **self.solver,
        )


# defaults that differ from the demo ones, per mode
_MODE_DEFAULTS = {
    "mms": dict(eps=0.1, bc="periodic", t_final=0.5),
    "simulate": {},
    "demo_spinodal": {},
}


def serialize(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["formats"] = list(cfg.formats)
    d["levels"] = list(cfg.levels)
    return d


def _parse_levels(value):
    if isinstance(value, str):
        try:
            a, b = (int(s) for s in value.split(".."))
        except ValueError:
            raise ConfigError("levels", f"expected 'k1..k2', got {value!r}") from None
        value = (a, b)
    try:
        a, b = (int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError("levels", f"expected two integers, got {value!r}") from None
    if not 2 <= a < b <= 12:
        raise ConfigError("levels", f"need 2 <= k1 < k2 <= 12, got {a}..{b}")
    return (a, b)


def _parse_formats(value):
    if isinstance(value, str):
        value = ("csv", "vtk") if value == "both" else (value,)
    value = tuple(value)
    bad = [v for v in value if v not in ("csv", "vtk")]
    if bad or not value:
        raise ConfigError("formats", f"expected csv, vtk or both, got {value!r}")
    return value


def parse_config(source=None, **overrides) -> RunConfig:
    """Build a validated :class:`RunConfig` from a JSON file, a mapping and/or keywords.

    Keyword overrides with value ``None`` are ignored (unset CLI flags).
    Every default that is applied is logged.
    """
    raw: dict = {}
    if isinstance(source, (str, Path)):
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {source}: {exc}") from None
    elif source is not None:
        raw = dict(source)
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})

    names = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")

    mode = raw.get("mode", RunConfig.mode)
    if mode == "demo":
        mode = "demo_spinodal"
    if mode not in MODES:
        raise ConfigError("mode", f"expected one of {MODES}, got {mode!r}")
    values = {**asdict(RunConfig()), **_MODE_DEFAULTS[mode], "mode": mode}
    for name in sorted(names - set(raw) - {"mode"}):
        log.info("default %s = %r", name, values[name])
    values.update({k: v for k, v in raw.items() if k != "mode"})

    try:
        for key in ("n", "seed", "cadence", "checkpoint_every"):
            values[key] = int(values[key])
        for key in ("tau", "t_final", "eps", "theta0", "gamma", "nu", "beta0", "amplitude",
                    "mass_tol", "div_tol", "energy_slack"):
            values[key] = float(values[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None

    cfg = RunConfig(**values)
    cfg.levels = _parse_levels(cfg.levels)
    cfg.formats = _parse_formats(cfg.formats)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.n < 4:
        raise ConfigError("n", "need at least 4 cells per direction")
    for key in ("tau", "t_final", "eps", "theta0", "gamma", "nu"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(key, "must be positive")
    if cfg.mode != "mms" and abs(cfg.steps * cfg.tau - cfg.t_final) > 1e-9 * cfg.t_final:
        raise ConfigError("t_final", f"{cfg.t_final} is not a multiple of tau={cfg.tau}")
    if cfg.bc not in {m.value for m in BcMode}:
        raise ConfigError("bc", f"expected physical or periodic, got {cfg.bc!r}")
    if not abs(cfg.beta0) <= 0.5:
        raise ConfigError("beta0", "mean must satisfy |beta0| <= 0.5")
    if not 0 <= cfg.amplitude <= 0.05:
        raise ConfigError("amplitude", "noise amplitude must lie in [0, 0.05]")
    if cfg.cadence < 1:
        raise ConfigError("cadence", "must be >= 1")
    if cfg.checkpoint_every < 0:
        raise ConfigError("checkpoint_every", "must be >= 0")
    if not isinstance(cfg.solver, dict):
        raise ConfigError("solver", "must be a mapping")
    for key in cfg.solver:
        if key not in _SOLVER_KEYS:
            raise ConfigError(f"solver.{key}", "unknown solver setting")
    if cfg.init_file is not None and not Path(cfg.init_file).is_file():
        raise ConfigError("init_file", f"{cfg.init_file} does not exist")
    try:
        cfg.scheme_params()
    except (TypeError, ValueError) as exc:
        raise ConfigError("solver", str(exc)) from None


# ----------------------------------------------------------------------
# initial data and checkpoints

def random_phase(grid: Grid, beta0: float, amplitude: float, seed: int) -> np.ndarray:
    """``beta0 + amplitude * U(-1, 1)`` per cell, re-centred to mean ``beta0``."""
    rng = np.random.default_rng(seed)
    phi = grid.zeros("c")
    noise = amplitude * rng.uniform(-1.0, 1.0, size=(grid.n, grid.n))
    phi[grid.block] = beta0 + noise - noise.mean()
    return grid.fill(phi, inplace=True)


def initial_state(cfg: RunConfig, integ: CHNSIntegrator) -> SimState:
    g = integ.grid
    u0 = g.zero_velocity()
    if cfg.init_file:
        with np.load(cfg.init_file) as data:
            phi = g.zeros("c")
            phi[g.block] = data["phi"]
            if "ux" in data and "uy" in data:
                u0.x[:] = data["ux"]
                u0.y[:] = data["uy"]
        phi = g.fill(phi, inplace=True)
    else:
        phi = random_phase(g, cfg.beta0, cfg.amplitude, cfg.seed)
    state = integ.init_history(phi, u0)
    state.mu = pointwise_chemical_potential(g, state.phi, cfg.eps, cfg.theta0)
    return state


def pointwise_chemical_potential(grid: Grid, phi, eps, theta0):
    return grid.fill(
        np.log1p(phi) - np.log1p(-phi) - theta0 * phi - eps**2 * grid.fill(grid.lap(phi)),
        inplace=True,
    )


def save_checkpoint(path: Path, state: SimState, cfg: RunConfig):
    np.savez(
        path,
        n=state.n, mass0=state.mass0,
        phi=state.phi, phi_prev=state.phi_prev, p=state.p,
        mu=state.mu if state.mu is not None else np.zeros_like(state.phi),
        ux=state.u.x, uy=state.u.y, ux_prev=state.u_prev.x, uy_prev=state.u_prev.y,
        config=json.dumps(serialize(cfg)),
    )


def load_checkpoint(path) -> tuple[SimState, dict]:
    with np.load(path) as d:
        state = SimState(
            int(d["n"]), d["phi"].copy(), d["phi_prev"].copy(),
            MacVelocity(d["ux"].copy(), d["uy"].copy()),
            MacVelocity(d["ux_prev"].copy(), d["uy_prev"].copy()),
            d["p"].copy(), d["mu"].copy(), float(d["mass0"]),
        )
        cfg = json.loads(str(d["config"]))
    return state, cfg


# ----------------------------------------------------------------------
# field output

def vertex_velocity(grid: Grid, u: MacVelocity):
    """Velocity averaged from the edges onto the ``(n+1) x (n+1)`` vertices."""
    n = grid.n
    u = grid.fill_velocity(u)
    vx = 0.5 * (u.x[1:n + 2, 0:n + 1] + u.x[1:n + 2, 1:n + 2])
    vy = 0.5 * (u.y[0:n + 1, 1:n + 2] + u.y[1:n + 2, 1:n + 2])
    return vx, vy


def cell_velocity(grid: Grid, u: MacVelocity):
    n = grid.n
    return 0.5 * (u.x[1:n + 1, 1:n + 1] + u.x[2:n + 2, 1:n + 1]), 0.5 * (
        u.y[1:n + 1, 1:n + 1] + u.y[1:n + 1, 2:n + 2]
    )


def write_vtk(path: Path, grid: Grid, state: SimState, seed: int):
    n, h = grid.n, grid.h
    b = grid.block
    # VTK wants x varying fastest; axis 0 is x, hence the transposes
    flat = lambda a: " ".join(f"{v:.17g}" for v in a.T.ravel())  # noqa: E731
    lines = [
        "# vtk DataFile Version 3.0",
        f"chnsfh step={state.n} seed={seed}",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {n + 1} {n + 1} 1",
        "ORIGIN 0 0 0",
        f"SPACING {h:.17g} {h:.17g} 1",
        f"CELL_DATA {n * n}",
    ]
    mu = state.mu if state.mu is not None else np.zeros_like(state.phi)
    for name, f in (("phi", state.phi), ("mu", mu), ("p", state.p)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default", flat(f[b])]
    vx, vy = vertex_velocity(grid, state.u)
    vec = np.stack([vx.T.ravel(), vy.T.ravel(), np.zeros(vx.size)], axis=1)
    lines += [f"POINT_DATA {(n + 1) ** 2}", "VECTORS velocity double"]
    lines += [f"{a:.17g} {c:.17g} {z:g}" for a, c, z in vec]
    path.write_text("\n".join(lines) + "\n")


def write_field_csv(path: Path, grid: Grid, state: SimState, seed: int):
    b = grid.block
    x, y = grid.coords("c")
    cx, cy = cell_velocity(grid, state.u)
    mu = state.mu if state.mu is not None else np.zeros_like(state.phi)
    cols = [x[b], y[b], state.phi[b], mu[b], state.p[b], cx, cy]
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed} step={state.n}\n")
        w = csv.writer(fh)
        w.writerow(["x", "y", "phi", "mu", "p", "u", "v"])
        w.writerows(zip(*(c.ravel().tolist() for c in cols)))


def write_fields(out: Path, grid: Grid, state: SimState, cfg: RunConfig):
    stem = out / f"fields_{state.n:06d}"
    if "vtk" in cfg.formats:
        write_vtk(stem.with_suffix(".vtk"), grid, state, cfg.seed)
    if "csv" in cfg.formats:
        write_field_csv(stem.with_suffix(".csv"), grid, state, cfg.seed)


class DiagnosticsWriter:
    """Appends one row per step; the only writer of ``diagnostics.csv``."""

    def __init__(self, path: Path, seed: int, append: bool = False):
        fresh = not (append and path.exists())
        self._fh = open(path, "w" if fresh else "a", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=DIAGNOSTIC_COLUMNS)
        if fresh:
            self._fh.write(f"# seed={seed}\n")
            self._w.writeheader()

    def write(self, row: dict):
        self._w.writerow({k: row[k] for k in DIAGNOSTIC_COLUMNS})
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_diagnostics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [{k: float(v) for k, v in r.items()} for r in rows]


# ----------------------------------------------------------------------
# orchestration

class InvariantBreach(ChnsError):
    def __init__(self, name, message):
        super().__init__(f"{name}: {message}")
        self.name = name


def _check_invariants(diag: StepDiagnostics, cfg: RunConfig):
    if not max(abs(diag.phi_min), abs(diag.phi_max)) < 1.0:
        raise InvariantBreach("positivity", f"|phi| reached {max(abs(diag.phi_min), abs(diag.phi_max))!r}")
    if abs(diag.mass_drift) > cfg.mass_tol:
        raise InvariantBreach("mass", f"drift {diag.mass_drift:.3e} exceeds {cfg.mass_tol:.1e}")
    if diag.div_inf > cfg.div_tol:
        raise InvariantBreach("divergence", f"max |div u| = {diag.div_inf:.3e} exceeds {cfg.div_tol:.1e}")


def simulate(cfg: RunConfig, resume: Optional[str] = None) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.scheme_params()
    integ = CHNSIntegrator(params)
    g = integ.grid
    if resume:
        state, _ = load_checkpoint(resume)
        log.info("resuming from %s at step %d", resume, state.n)
    else:
        state = initial_state(cfg, integ)
    (out / "config.json").write_text(json.dumps(serialize(cfg), indent=2) + "\n")

    writer = DiagnosticsWriter(out / "diagnostics.csv", cfg.seed, append=bool(resume))
    if not resume:
        row = state_monitors(g, state, params)
        writer.write({**row, "step": 0, "time": 0.0, "outer_iters": 0, "newton_iters": 0,
                      "damping_events": 0})
        write_fields(out, g, state, cfg)
    energy = state_monitors(g, state, params)["energy"]
    violations = 0
    try:
        while state.n < cfg.steps:
            try:
                new, diag = integ.step(state)
            except (PositivityBreach, OutOfBounds) as exc:
                raise InvariantBreach("positivity", str(exc)) from exc
            writer.write(diag.row())
            _check_invariants(diag, cfg)
            if diag.energy > energy + cfg.energy_slack * abs(energy):
                violations += 1
                log.warning("step %d: energy rose by %.3e", diag.step, diag.energy - energy)
            energy = diag.energy
            state = new
            if state.n % cfg.cadence == 0 or state.n == cfg.steps:
                write_fields(out, g, state, cfg)
            if cfg.checkpoint_every and state.n % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint.npz", state, cfg)
    except InvariantBreach as exc:
        log.error("invariant breach at step %d: %s", state.n + 1, exc)
        save_checkpoint(out / "failure_checkpoint.npz", state, cfg)
        return EXIT_BREACH
    except ChnsError as exc:
        log.error("solver failure at step %d: %s", state.n + 1, exc)
        save_checkpoint(out / "failure_checkpoint.npz", state, cfg)
        return EXIT_SOLVER
    finally:
        writer.close()
    save_checkpoint(out / "checkpoint.npz", state, cfg)
    if violations:
        log.warning("%d energy increases beyond the slack", violations)
    log.info("finished %d steps; mass drift %.3e", state.n, g.mean(state.phi) - state.mass0)
    return EXIT_OK


def mms(cfg: RunConfig) -> int:
    from .verification import convergence_study

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    k1, k2 = cfg.levels
    try:
        table = convergence_study(
            range(k1, k2 + 1), T=cfg.t_final, eps=cfg.eps, theta0=cfg.theta0,
            gamma=cfg.gamma, nu=cfg.nu, **cfg.solver,
        )
    except ChnsError as exc:
        log.error("manufactured-solution run failed: %s", exc)
        return EXIT_SOLVER
    table.to_csv(out / "rates.csv")
    (out / "config.json").write_text(json.dumps(serialize(cfg), indent=2) + "\n")
    print(table.format())
    return EXIT_OK


def run(cfg: RunConfig, resume: Optional[str] = None) -> int:
    if cfg.mode == "mms":
        return mms(cfg)
    return simulate(cfg, resume)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig keys")
    common.add_argument("--n", type=int, help="cells per direction")
    common.add_argument("--tau", type=float, help="time step")
    common.add_argument("--tfinal", type=float, dest="t_final", help="final time")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="seed for random initial data")
    common.add_argument("--levels", help="MMS levels as k1..k2")
    common.add_argument("--format", dest="formats", choices=("csv", "vtk", "both"),
                        help="field output format")
    common.add_argument("--cadence", type=int, help="steps between field outputs")
    common.add_argument("--resume", help="checkpoint.npz to continue from")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="chnsfh", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run from a config or initial file")
    sub.add_parser("mms", parents=[common], help="manufactured-solution convergence study")
    sub.add_parser("demo", parents=[common], help="spinodal decomposition demo")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    mode = {"demo": "demo_spinodal"}.get(args.command, args.command)
    flags = {k: getattr(args, k) for k in ("n", "tau", "t_final", "out", "seed", "levels",
                                          "formats", "cadence")}
    try:
        cfg = parse_config(args.config, mode=mode, **flags)
        if args.resume:
            with np.load(args.resume) as d:
                saved = json.loads(str(d["config"]))
            # the physics must match the checkpoint; output options may change
            for key in ("n", "tau", "eps", "theta0", "gamma", "nu", "bc"):
                if saved[key] != getattr(cfg, key):
                    raise ConfigError(key, f"differs from checkpoint ({saved[key]!r})")
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    return run(cfg, resume=args.resume)


if __name__ == "__main__":
    sys.exit(main())
