"""Manufactured-solution harness, error norms and run monitors."""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import OutOfBounds
from .grid import BcMode, Grid
from .scheme import (
    SchemeParams,
    SimState,
    SourceTerms,
    integrator,
    state_monitors,
)

log = logging.getLogger(__name__)

K = 2.0 * math.pi


@dataclass(frozen=True)
class MmsFields:
    """Closed-form exact solution and the forcing that makes it solve the PDE.

    phi = 0.5 sin(kx) cos(ky) cos t + 0.1, p = sin t sin(kx),
    u = -cos t cos(kx) sin(ky),  v = cos t sin(kx) cos(ky),  k = 2 pi.
    """

    eps: float = 0.1
    theta0: float = 3.0
    gamma: float = 1.0
    nu: float = 1.0

    # exact fields
    def phi(self, x, y, t):
        return 0.5 * np.sin(K * x) * np.cos(K * y) * np.cos(t) + 0.1

    def u(self, x, y, t):
        return -np.cos(t) * np.cos(K * x) * np.sin(K * y)

    def v(self, x, y, t):
        return np.cos(t) * np.sin(K * x) * np.cos(K * y)

    def p(self, x, y, t):
        return np.sin(t) * np.sin(K * x) * np.ones_like(y)

    # derivatives
    def _phi_parts(self, x, y, t):
        sx, cx = np.sin(K * x), np.cos(K * x)
        sy, cy = np.sin(K * y), np.cos(K * y)
        ct = np.cos(t)
        phi = 0.5 * sx * cy * ct + 0.1
        phi_x = 0.5 * K * cx * cy * ct
        phi_y = -0.5 * K * sx * sy * ct
        lap_phi = -2.0 * K**2 * (phi - 0.1)
        return phi, phi_x, phi_y, lap_phi

    def mu(self, x, y, t):
        phi, _, _, lap_phi = self._phi_parts(x, y, t)
        return np.log1p(phi) - np.log1p(-phi) - self.theta0 * phi - self.eps**2 * lap_phi

    def source_phase(self, x, y, t):
        """``phi_t + div(phi u) - lap mu``."""
        phi, phi_x, phi_y, lap_phi = self._phi_parts(x, y, t)
        if np.any(np.abs(phi) >= 1):
            raise OutOfBounds("exact phase field left (-1, 1)")
        sy, cy = np.sin(K * y), np.cos(K * y)
        phi_t = -0.5 * np.sin(K * x) * cy * np.sin(t)
        transport = -0.5 * K * np.cos(t) ** 2 * sy * cy * np.ones_like(x)
        g1 = 2.0 / (1.0 - phi**2)
        g2 = 4.0 * phi / (1.0 - phi**2) ** 2
        bilap = -2.0 * K**2 * lap_phi
        lap_mu = (g1 - self.theta0) * lap_phi + g2 * (phi_x**2 + phi_y**2) - self.eps**2 * bilap
        return phi_t + transport - lap_mu

    def _force_coeff(self, phi):
        # grad mu = (g' - theta0 + 2 k^2 eps^2) grad phi for this phi
        return 2.0 / (1.0 - phi**2) - self.theta0 + 2.0 * K**2 * self.eps**2

    def source_u(self, x, y, t):
        """x-component of ``u_t + u.grad u + grad p - nu lap u + gamma phi grad mu``."""
        phi, phi_x, _, _ = self._phi_parts(x, y, t)
        sx, cx = np.sin(K * x), np.cos(K * x)
        sy = np.sin(K * y)
        ct, st = np.cos(t), np.sin(t)
        u = -ct * cx * sy
        return (
            st * cx * sy
            - K * ct**2 * sx * cx
            + K * st * cx
            + 2.0 * self.nu * K**2 * u
            + self.gamma * phi * self._force_coeff(phi) * phi_x
        )

    def source_v(self, x, y, t):
        phi, _, phi_y, _ = self._phi_parts(x, y, t)
        sx = np.sin(K * x)
        sy, cy = np.sin(K * y), np.cos(K * y)
        ct, st = np.cos(t), np.sin(t)
        v = ct * sx * cy
        return (
            -st * sx * cy
            - K * ct**2 * sy * cy
            + 2.0 * self.nu * K**2 * v
            + self.gamma * phi * self._force_coeff(phi) * phi_y
        )

    @classmethod
    def from_params(cls, params: SchemeParams) -> "MmsFields":
        return cls(params.eps, params.theta0, params.gamma, params.nu)


def mms_exact(grid: Grid, t: float, mms: Optional[MmsFields] = None):
    """Exact ``(phi, u, p)`` sampled at their staggered locations."""
    mms = mms or MmsFields()
    phi = grid.sample(lambda X, Y: mms.phi(X, Y, t), "c")
    u = grid.sample_velocity(lambda X, Y: mms.u(X, Y, t), lambda X, Y: mms.v(X, Y, t))
    p = grid.sample(lambda X, Y: mms.p(X, Y, t), "c")
    return phi, u, p


def mms_sources(grid: Grid, mms: MmsFields) -> SourceTerms:
    """Forcing evaluated pointwise at the time the stepper asks for (``t^{n+1/2}``)."""
    return SourceTerms(
        phase=lambda t: grid.sample(lambda X, Y: mms.source_phase(X, Y, t), "c"),
        momentum=lambda t: grid.sample_velocity(
            lambda X, Y: mms.source_u(X, Y, t), lambda X, Y: mms.source_v(X, Y, t)
        ),
        exact=lambda t: mms_exact(grid, t, mms),
    )


# ----------------------------------------------------------------------
# error norms


@dataclass
class ErrorRecord:
    time: float
    phi_h1: float
    u_l2: float
    p_h1: float


@dataclass
class ErrorSummary:
    """Per-time errors plus the composite of the convergence estimate."""

    history: list = field(default_factory=list)
    phi_h1_max: float = 0.0
    u_l2_max: float = 0.0
    h3_accum: float = 0.0  # (eps^2/8) tau sum ||grad lap phi_err||^2, before the sqrt
    phi_h1_final: float = 0.0
    u_l2_final: float = 0.0
    p_h1_final: float = 0.0

    @property
    def h3_term(self) -> float:
        return math.sqrt(self.h3_accum)

    @property
    def composite(self) -> float:
        return self.phi_h1_max + self.u_l2_max + self.h3_term


def state_errors(grid: Grid, phi, u, p, phi_e, u_e, p_e):
    """``(||grad_h phi_err||, ||u_err||, ||grad_h p_err||, ||grad_h lap_h phi_err||)``."""
    e_phi = grid.fill(phi_e - phi)
    e_u = u_e - u
    e_p = grid.fill(p_e - p)
    lap_e = grid.fill(grid.lap(e_phi), inplace=True)
    return (
        math.sqrt(grid.grad_norm_sq(e_phi)),
        grid.norm(e_u),
        math.sqrt(grid.grad_norm_sq(e_p)),
        math.sqrt(grid.grad_norm_sq(lap_e)),
    )


class ErrorAccumulator:
    """Streaming version of :func:`error_norms` (no history kept in memory)."""

    def __init__(self, grid: Grid, mms: MmsFields, tau: float, eps: float):
        self.grid, self.mms, self.tau, self.eps = grid, mms, tau, eps
        self.summary = ErrorSummary()

    def add(self, t, phi, u, p, level_index=None):
        phi_e, u_e, p_e = mms_exact(self.grid, t, self.mms)
        a, b, c, d = state_errors(self.grid, phi, u, p, phi_e, u_e, p_e)
        s = self.summary
        s.history.append(ErrorRecord(t, a, b, c))
        s.phi_h1_max = max(s.phi_h1_max, a)
        s.u_l2_max = max(s.u_l2_max, b)
        if level_index is None or level_index >= 1:
            s.h3_accum += self.eps**2 / 8.0 * self.tau * d**2
        s.phi_h1_final, s.u_l2_final, s.p_h1_final = a, b, c


def error_norms(grid: Grid, history: Iterable, mms: MmsFields, tau: float, eps: float):
    """Errors against the exact solution for states ``(n, phi, u, p)`` or :class:`SimState`.

    Returns an :class:`ErrorSummary`; the ``H^3``-type sum runs over ``n >= 1``.
    """
    acc = ErrorAccumulator(grid, mms, tau, eps)
    for item in history:
        if isinstance(item, SimState):
            n, phi, u, p = item.n, item.phi, item.u, item.p
        else:
            n, phi, u, p = item
        acc.add(n * tau, phi, u, p, level_index=n)
    return acc.summary


# ----------------------------------------------------------------------
# convergence study

RATE_COLUMNS = ("k", "h", "tau", "err_phi_H1", "err_u_L2", "err_p_H1", "composite",
                "order_phi", "order_u", "order_p")


@dataclass
class LevelResult:
    k: int
    h: float
    tau: float
    err_phi_H1: float
    err_u_L2: float
    err_p_H1: float
    composite: float
    steps: int = 0
    max_outer: int = 0
    max_div: float = 0.0  # largest ||div_h u||_inf over the steps


@dataclass
class RateTable:
    levels: list

    def orders(self):
        """log2 ratios between each adjacent pair of levels."""
        out = []
        for a, b in zip(self.levels, self.levels[1:]):
            r = math.log2(a.h / b.h)
            out.append({
                "k": b.k,
                "order_phi": math.log(a.err_phi_H1 / b.err_phi_H1, 2) / r,
                "order_u": math.log(a.err_u_L2 / b.err_u_L2, 2) / r,
                "order_p": math.log(a.err_p_H1 / b.err_p_H1, 2) / r,
            })
        return out

    def rows(self):
        orders = {o["k"]: o for o in self.orders()}
        rows = []
        for lev in self.levels:
            row = {c: getattr(lev, c) for c in RATE_COLUMNS[:7]}
            o = orders.get(lev.k, {})
            for c in RATE_COLUMNS[7:]:
                row[c] = o.get(c, "")
            rows.append(row)
        return rows

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=RATE_COLUMNS)
            w.writeheader()
            w.writerows(self.rows())

    def format(self) -> str:
        lines = ["  k        h     err_phi_H1    err_u_L2    err_p_H1   ord_phi ord_u ord_p"]
        for r in self.rows():
            fmt = lambda v: f"{v:5.2f}" if v != "" else "   - "  # noqa: E731
            lines.append(
                f"{r['k']:3d} {r['h']:.3e} {r['err_phi_H1']:.4e} {r['err_u_L2']:.4e} "
                f"{r['err_p_H1']:.4e}   {fmt(r['order_phi'])} {fmt(r['order_u'])} {fmt(r['order_p'])}"
            )
        return "\n".join(lines)


def mms_params(k: int, **overrides) -> SchemeParams:
    """Periodic parameters for level ``h = tau = 2^-k``."""
    n = 2**k
    base = dict(n=n, tau=1.0 / n, eps=0.1, theta0=3.0, gamma=1.0, nu=1.0, bc=BcMode.PERIODIC)
    base.update(overrides)
    return SchemeParams(**base)


def run_mms_level(params: SchemeParams, T: float, k: Optional[int] = None) -> LevelResult:
    """Integrate the manufactured problem to ``T`` and report final-time errors."""
    grid = params.grid
    mms = MmsFields.from_params(params)
    sources = mms_sources(grid, mms)
    steps = int(round(T / params.tau))
    if abs(steps * params.tau - T) > 1e-12 * max(T, 1.0):
        raise ValueError(f"T={T} is not a multiple of tau={params.tau}")
    integ = integrator(params)
    phi0, u0, _ = mms_exact(grid, 0.0, mms)
    state = integ.init_history(phi0, u0, sources)
    acc = ErrorAccumulator(grid, mms, params.tau, params.eps)
    acc.add(0.0, state.phi, state.u, state.p, level_index=0)
    max_outer, max_div = 0, 0.0
    for _ in range(steps):
        state, diag = integ.step(state, sources)
        max_outer = max(max_outer, diag.outer_iters)
        max_div = max(max_div, diag.div_inf)
        acc.add(state.n * params.tau, state.phi, state.u, state.p, level_index=state.n)
    s = acc.summary
    return LevelResult(
        k=k if k is not None else int(round(math.log2(params.n))),
        h=params.h,
        tau=params.tau,
        err_phi_H1=s.phi_h1_final,
        err_u_L2=s.u_l2_final,
        err_p_H1=s.p_h1_final,
        composite=s.composite,
        steps=steps,
        max_outer=max_outer,
        max_div=max_div,
    )


def _level_job(args):
    k, T, overrides = args
    return run_mms_level(mms_params(k, **overrides), T, k)


def convergence_study(levels, T=0.5, workers: Optional[int] = None, **overrides) -> RateTable:
    """Run the manufactured problem at ``h = tau = 2^-k`` for each ``k`` in ``levels``.

    ``workers`` defaults to the ``CHNSFH_WORKERS`` environment variable (1).
    """
    levels = list(levels)
    if levels != sorted(set(levels)):
        raise ValueError("levels must be strictly increasing")
    if workers is None:
        workers = int(os.environ.get("CHNSFH_WORKERS", "1"))
    jobs = [(k, T, overrides) for k in levels]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_level_job, jobs))
    else:
        results = [_level_job(j) for j in jobs]
    for r in results:
        log.info("level k=%d: phi %.3e u %.3e p %.3e", r.k, r.err_phi_H1, r.err_u_L2, r.err_p_H1)
    return RateTable(results)


def one_step_error(k: int, **overrides) -> float:
    """Composite error after a single step from exact data at ``h = tau = 2^-k``."""
    params = mms_params(k, **overrides)
    grid = params.grid
    mms = MmsFields.from_params(params)
    sources = mms_sources(grid, mms)
    integ = integrator(params)
    phi0, u0, _ = mms_exact(grid, 0.0, mms)
    state = integ.init_history(phi0, u0, sources)
    state, _ = integ.step(state, sources)
    phi_e, u_e, p_e = mms_exact(grid, params.tau, mms)
    a, b, _, d = state_errors(grid, state.phi, state.u, state.p, phi_e, u_e, p_e)
    return a + b + math.sqrt(params.eps**2 / 8.0 * params.tau * d**2)


def monitor(state: SimState, params: SchemeParams) -> dict:
    """Positivity margin, mass drift, total energy and divergence of ``state``."""
    return state_monitors(params.grid, state, params)


__all__ = [
    "MmsFields", "mms_exact", "mms_sources", "ErrorSummary", "ErrorAccumulator",
    "error_norms", "state_errors", "RateTable", "LevelResult", "convergence_study",
    "run_mms_level", "mms_params", "one_step_error", "monitor", "RATE_COLUMNS",
]
