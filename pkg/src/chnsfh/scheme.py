"""Second-order positivity-preserving CHNS time stepping.

One step couples four sub-solves:

* a damped Newton solve of the Cahn-Hilliard equation for ``phi^{n+1}`` with
  the intermediate velocity frozen,
* a linear momentum solve for the intermediate velocity ``u_hat`` with the
  chemical potential frozen,
* an outer Picard loop alternating the two until both stop moving,
* a pressure-increment projection giving a divergence-free ``u^{n+1}``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    LinearSolveFailure,
    NewtonFailure,
    NoConvergence,
    OutOfBounds,
    OuterNoConvergence,
    PositivityBreach,
)
from .grid import BcMode, Grid, MacVelocity
from .linsolve import LinearOperator, solve_general, solve_spd
from .operators import (
    check_bounds,
    convect_velocity,
    div_phi_u,
    phi_grad_mu,
    total_energy,
)
from .potential import (
    PotentialParams,
    chemical_potential,
    chemical_potential_linearization,
)

log = logging.getLogger(__name__)

_CLAMP = 1.0 - 1e-8
# Krylov iterations above which the Newton solve falls back to a sparse LU
_SPECTRAL_MAX_ITERS = 25


@dataclass(frozen=True)
class SchemeParams:
    """Physical constants, discretization and solver controls."""

    n: int
    tau: float
    eps: float = 0.1
    theta0: float = 3.0
    gamma: float = 1.0
    nu: float = 1.0
    bc: BcMode = BcMode.PHYSICAL
    newton_tol: float = 1e-10
    newton_max: int = 50
    outer_tol: float = 1e-10
    outer_max: int = 50
    safety_fraction: float = 0.9
    max_halvings: int = 30
    poisson_tol: float = 1e-11
    inner_tol: float = 1e-10
    diag_switch_tol: float = 1e-7
    max_iter: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "bc", BcMode(self.bc))
        for name in ("eps", "theta0", "gamma", "nu", "tau", "newton_tol", "outer_tol",
                     "poisson_tol", "inner_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not 0 < self.safety_fraction < 1:
            raise ValueError("safety_fraction must lie in (0, 1)")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError("n must be an integer >= 2")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def grid(self) -> Grid:
        return Grid(self.n, self.bc)

    @property
    def potential(self) -> PotentialParams:
        return PotentialParams(self.theta0, self.eps, diag_switch_tol=self.diag_switch_tol)

    @property
    def iter_cap(self) -> int:
        return self.max_iter or 10 * self.n


@dataclass
class SourceTerms:
    """Optional forcing, evaluated by the stepper at ``t^{n+1/2}``.

    ``phase(t)`` returns a cell field, ``momentum(t)`` a :class:`MacVelocity`.
    ``exact(t)``, when given, returns ``(phi, u, p)`` and is used to seed the
    two-level history.
    """

    phase: Optional[Callable[[float], np.ndarray]] = None
    momentum: Optional[Callable[[float], MacVelocity]] = None
    exact: Optional[Callable[[float], tuple]] = None


@dataclass
class SimState:
    n: int
    phi: np.ndarray
    phi_prev: np.ndarray
    u: MacVelocity
    u_prev: MacVelocity
    p: np.ndarray
    mu: Optional[np.ndarray] = None
    mass0: Optional[float] = None


@dataclass
class NewtonLog:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    damping_events: int = 0
    min_alpha: float = 1.0
    reports: list = field(default_factory=list)


@dataclass
class StepDiagnostics:
    step: int
    time: float
    outer_iters: int
    newton_iters: list
    damping_events: int
    min_alpha: float
    mass: float
    mass_drift: float
    phi_min: float
    phi_max: float
    energy: float
    div_inf: float
    outer_updates: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    def row(self) -> dict:
        return {
            "step": self.step,
            "time": self.time,
            "mass": self.mass,
            "mass_drift": self.mass_drift,
            "phi_min": self.phi_min,
            "phi_max": self.phi_max,
            "energy": self.energy,
            "div_inf": self.div_inf,
            "outer_iters": self.outer_iters,
            "newton_iters": sum(self.newton_iters),
            "damping_events": self.damping_events,
        }


def state_monitors(grid: Grid, state: SimState, params: SchemeParams) -> dict:
    """Mass, extrema, energy and divergence of a state."""
    phi = state.phi
    mass = grid.mean(phi)
    mass0 = state.mass0 if state.mass0 is not None else mass
    interior = phi[grid.block]
    return {
        "mass": mass,
        "mass_drift": mass - mass0,
        "phi_min": float(interior.min()),
        "phi_max": float(interior.max()),
        "margin": float(np.min(1.0 - np.abs(interior))),
        "energy": total_energy(grid, phi, state.u, params.eps, params.theta0, params.gamma),
        "div_inf": grid.norm(grid.div(state.u), np.inf),
    }


class CHNSIntegrator:
    """Stateful helper holding factorizations reused across steps."""

    def __init__(self, params: SchemeParams):
        self.params = params
        self.grid = params.grid
        self.pot = params.potential
        self._A = None
        self._newton_lu = None
        self._newton_stale = True
        self._use_lu = False
        g, prm = self.grid, params
        k = g.velocity_size // 2
        ux = g.spectral_solver(1.0 / prm.tau, 0.5 * prm.nu, kind="ux")
        uy = g.spectral_solver(1.0 / prm.tau, 0.5 * prm.nu, kind="uy")
        self._mom_precond = lambda r: np.concatenate([ux(r[:k]), uy(r[k:])])

    # ------------------------------------------------------------------
    # Cahn-Hilliard

    def ch_residual(self, phi, phi_n, phi_nm1, transport, src):
        """Residual of the phase equation and the matching ``mu^{n+1/2}``."""
        g, tau = self.grid, self.params.tau
        mu = chemical_potential(g, phi, phi_n, phi_nm1, tau, self.pot)
        R = (phi - phi_n) / tau + transport - g.lap(mu)
        if src is not None:
            R = R - src
        return g.pack(R), mu

    def _newton_operator(self, phi, phi_n):
        g, tau = self.grid, self.params.tau
        D, c = chemical_potential_linearization(g, phi, phi_n, tau, self.pot)

        def apply(v):
            d = g.unpack(v)
            w = g.fill(D * d + c * g.fill(g.lap(d), inplace=True), inplace=True)
            return g.pack(d / tau - g.lap(w))

        if not self._use_lu:
            # constant-coefficient Jacobian with the mean of D, inverted exactly
            precond = g.spectral_solver(1.0 / tau, float(np.mean(D[g.block])), -c)
            return LinearOperator(apply, preconditioner=precond)
        if self._newton_stale or self._newton_lu is None:
            if self._A is None:
                self._A = g.neg_lap_matrix()
                self._AA = (self._A @ self._A).tocsc()
            Dp = g.pack(D)
            J = sp.identity(Dp.size, format="csc") / tau + self._A @ sp.diags(Dp) - c * self._AA
            self._newton_lu = spla.splu(J.tocsc(), permc_spec="MMD_AT_PLUS_A")
            self._newton_stale = False
        return LinearOperator(apply, preconditioner=self._newton_lu.solve)

    def solve_ch_newton(self, phi_n, phi_nm1, u_hat, u_n, src=None, guess=None):
        """Damped Newton for ``phi^{n+1}`` with the intermediate velocity frozen.

        Returns ``(phi_next, mu, NewtonLog)``.  Iterates never leave (-1, 1):
        an update that would cross +-1 is scaled so the worst cell covers
        ``safety_fraction`` of its distance to the bound, then halved until the
        residual decreases.
        """
        prm, g = self.params, self.grid
        tau = prm.tau
        phi_tilde = 1.5 * phi_n - 0.5 * phi_nm1
        u_bar = 0.5 * (u_hat + u_n)
        transport = div_phi_u(g, phi_tilde, u_bar)
        target = g.mean(phi_n) + (tau * g.mean(src) if src is not None else 0.0)

        phi = self._initial_guess(phi_n, phi_nm1, guess, target)
        R, mu = self.ch_residual(phi, phi_n, phi_nm1, transport, src)
        rnorm = np.linalg.norm(R) * g.h
        nlog = NewtonLog(residuals=[rnorm])
        if rnorm == 0.0:
            return phi, mu, nlog

        for _ in range(prm.newton_max):
            op = self._newton_operator(phi, phi_n)
            try:
                # ||J^{-1}|| <= tau, so this floor keeps the correction error
                # well below newton_tol once R is at round-off level
                delta, rep = solve_general(
                    op, -R, tol=prm.inner_tol, max_iter=prm.iter_cap,
                    atol=0.1 * prm.newton_tol / tau,
                )
            except NoConvergence as exc:
                raise LinearSolveFailure("Newton correction solve failed", exc.report) from exc
            nlog.reports.append(rep)
            if self._use_lu:
                self._newton_stale = self._newton_stale or rep.iterations > 10
            elif rep.iterations > _SPECTRAL_MAX_ITERS:
                # strongly varying D near the barrier: switch to the sparse LU
                self._use_lu = True
            delta = delta + (target - g.mean(phi)) - delta.mean()
            d = g.unpack(delta)
            step_inf = float(np.max(np.abs(delta)))

            interior = phi[g.block].ravel()
            dist = np.where(delta > 0, 1.0 - interior, 1.0 + interior)
            ratio = float(np.max(np.abs(delta) / dist))
            alpha = 1.0
            if ratio >= 1.0:
                alpha = prm.safety_fraction / ratio
                nlog.damping_events += 1
            for _h in range(prm.max_halvings + 1):
                trial = phi + alpha * d
                R_t, mu_t = self.ch_residual(trial, phi_n, phi_nm1, transport, src)
                rt = np.linalg.norm(R_t) * g.h
                if rt < rnorm or alpha * step_inf < 1e-9:
                    break
                alpha *= 0.5
            else:
                raise NewtonFailure(
                    f"line search failed after {prm.max_halvings} halvings", nlog.residuals
                )
            nlog.min_alpha = min(nlog.min_alpha, alpha)
            phi, R, mu, rnorm = trial, R_t, mu_t, rt
            nlog.iterations += 1
            nlog.residuals.append(rnorm)
            nlog.steps.append(alpha * step_inf)
            if alpha == 1.0 and step_inf <= prm.newton_tol:
                return phi, mu, nlog
        raise NewtonFailure(
            f"Newton did not converge in {prm.newton_max} iterations "
            f"(last residual {nlog.residuals[-1]:.3e})",
            nlog.residuals,
        )

    def _initial_guess(self, phi_n, phi_nm1, guess, target):
        g = self.grid
        if guess is None:
            guess = np.clip(2.0 * phi_n - phi_nm1, -_CLAMP, _CLAMP)
        phi = guess + (target - g.mean(guess))
        if np.max(np.abs(phi)) >= _CLAMP:
            phi = phi_n + (target - g.mean(phi_n))
            if np.max(np.abs(phi)) >= 1.0:
                phi = phi_n.copy()
        return g.fill(phi, inplace=True)

    # ------------------------------------------------------------------
    # momentum and projection

    def momentum_operator(self, u_tilde: MacVelocity) -> LinearOperator:
        """``u_hat -> u_hat/tau + b_h(u_tilde, u_hat)/2 - (nu/2) lap_h u_hat``."""
        g, prm = self.grid, self.params

        def apply(v):
            w = g.unpack_velocity(v)
            out = w * (1.0 / prm.tau) + 0.5 * convect_velocity(g, u_tilde, w) - (
                0.5 * prm.nu
            ) * g.lap_velocity(w)
            return g.pack_velocity(out)

        return LinearOperator(apply, preconditioner=self._mom_precond)

    def momentum_rhs(self, u_n, u_tilde, p_n, phi_tilde, mu, src=None) -> MacVelocity:
        g, prm = self.grid, self.params
        rhs = (
            u_n * (1.0 / prm.tau)
            - 0.5 * convect_velocity(g, u_tilde, u_n)
            + (0.5 * prm.nu) * g.lap_velocity(u_n)
            - g.grad(p_n)
            - prm.gamma * phi_grad_mu(g, phi_tilde, mu)
        )
        if src is not None:
            rhs = rhs + src
        return rhs

    def solve_momentum(self, u_n, u_nm1, p_n, phi_tilde, mu, src=None, x0=None):
        """Intermediate velocity ``u_hat^{n+1}`` from the linear momentum system."""
        g, prm = self.grid, self.params
        u_tilde = 1.5 * u_n - 0.5 * u_nm1
        op = self.momentum_operator(u_tilde)
        rhs = g.pack_velocity(self.momentum_rhs(u_n, u_tilde, p_n, phi_tilde, mu, src))
        x0 = None if x0 is None else g.pack_velocity(x0)
        try:
            x, rep = solve_general(op, rhs, tol=prm.inner_tol, max_iter=prm.iter_cap, x0=x0)
        except NoConvergence as exc:
            raise LinearSolveFailure("momentum solve failed", exc.report) from exc
        return g.unpack_velocity(x), rep

    def project_velocity(self, u_hat: MacVelocity, p_n: np.ndarray):
        """Pressure-increment projection: returns ``(u^{n+1}, p^{n+1}, report)``."""
        g, tau = self.grid, self.params.tau
        div = g.pack(g.div(u_hat))
        div -= div.mean()  # zero up to round-off by telescoping
        op = g.poisson_operator()
        try:
            dp, rep = solve_spd(
                op, -(2.0 / tau) * div, tol=self.params.poisson_tol,
                max_iter=20 * g.n, project_mean=True,
            )
        except NoConvergence as exc:
            raise LinearSolveFailure("pressure Poisson solve failed", exc.report) from exc
        dp = g.unpack(dp)
        u_new = g.fill_velocity(u_hat - (0.5 * tau) * g.grad(dp), inplace=True)
        return u_new, p_n + dp, rep

    def leray_project(self, u: MacVelocity) -> MacVelocity:
        """Remove the discrete gradient part of ``u``."""
        g = self.grid
        div = g.pack(g.div(u))
        div -= div.mean()
        if not np.any(div):
            return g.fill_velocity(u)
        op = g.poisson_operator()
        psi, _ = solve_spd(op, -div, tol=self.params.poisson_tol, max_iter=20 * g.n,
                           project_mean=True)
        return g.fill_velocity(u - g.grad(g.unpack(psi)), inplace=True)

    # ------------------------------------------------------------------
    # history and stepping

    def init_history(self, phi0, u0, sources: Optional[SourceTerms] = None, use_exact=True):
        """Build the two-level starting state ``(phi^0, phi^{-1}, u^0, u^{-1}, p^0)``.

        With exact fields available (and ``use_exact``) the back level is
        sampled from them.  Otherwise one backward Euler-type evaluation of
        the PDE gives ``phi^{-1}`` and ``u^{-1}``; if the backward phase
        increment would leave (-1, 1) it is halved until it does not.
        """
        g, prm, tau = self.grid, self.params, self.params.tau
        phi0 = g.fill(np.asarray(phi0, dtype=float))
        check_bounds(g, phi0, "phi0")
        if sources is not None and sources.exact is not None and use_exact:
            _, _, p0 = sources.exact(0.0)
            phi_m1, u_m1, _ = sources.exact(-tau)
            u0 = g.fill_velocity(u0)
            return SimState(0, phi0, g.fill(phi_m1), u0, g.fill_velocity(u_m1), g.fill(p0),
                            mass0=g.mean(phi0))

        u0 = self.leray_project(u0)
        p0 = g.zeros("c")
        mu0 = g.fill(
            np.log1p(phi0) - np.log1p(-phi0) - prm.theta0 * phi0
            - prm.eps**2 * g.fill(g.lap(phi0)),
            inplace=True,
        )
        rate = g.lap(mu0) - div_phi_u(g, phi0, u0)
        has_phase_src = sources is not None and sources.phase is not None
        if has_phase_src:
            rate = rate + sources.phase(0.0)
        inc = tau * g.fill(rate, inplace=True)
        if not has_phase_src:
            inc[g.block] -= inc[g.block].mean()
            g.fill(inc, inplace=True)
        halvings = 0
        while np.max(np.abs(phi0 - inc)) >= _CLAMP:
            inc *= 0.5
            halvings += 1
            if halvings > 200:
                raise OutOfBounds("could not fit the backward phase increment inside (-1, 1)")
        if halvings:
            log.info("backward phase increment halved %d times", halvings)
        phi_m1 = g.fill(phi0 - inc, inplace=True)

        du = (
            -convect_velocity(g, u0, u0) - g.grad(p0) + prm.nu * g.lap_velocity(u0)
            - prm.gamma * phi_grad_mu(g, phi0, mu0)
        )
        if sources is not None and sources.momentum is not None:
            du = du + sources.momentum(0.0)
        u_m1 = self.leray_project(u0 - tau * du)
        state = SimState(0, phi0, phi_m1, u0, u_m1, p0, mass0=g.mean(phi0))
        state.init_halvings = halvings
        return state

    def step(self, state: SimState, sources: Optional[SourceTerms] = None):
        """Advance one time level; returns ``(new_state, StepDiagnostics)``."""
        g, prm = self.grid, self.params
        tau = prm.tau
        t_half = (state.n + 0.5) * tau
        s_phi = s_u = None
        if sources is not None:
            if sources.phase is not None:
                s_phi = sources.phase(t_half)
            if sources.momentum is not None:
                s_u = sources.momentum(t_half)

        phi_n, phi_nm1 = state.phi, state.phi_prev
        u_n, u_nm1 = state.u, state.u_prev
        phi_tilde = 1.5 * phi_n - 0.5 * phi_nm1
        u_hat = 1.5 * u_n - 0.5 * u_nm1
        self._newton_stale = True
        self._use_lu = False

        guess = None
        newton_iters, updates, reports = [], [], []
        damping, min_alpha = 0, 1.0
        for k in range(1, prm.outer_max + 1):
            phi_new, mu, nlog = self.solve_ch_newton(phi_n, phi_nm1, u_hat, u_n, s_phi, guess)
            newton_iters.append(nlog.iterations)
            damping += nlog.damping_events
            min_alpha = min(min_alpha, nlog.min_alpha)
            reports.extend(nlog.reports)
            u_new, rep = self.solve_momentum(u_n, u_nm1, state.p, phi_tilde, mu, s_u, x0=u_hat)
            reports.append(rep)
            if guess is not None:
                change = g.norm(phi_new - guess) + g.norm(u_new - u_hat)
                scale = g.norm(phi_new) + g.norm(u_new)
                updates.append(change)
            guess, u_hat = phi_new, u_new
            if k > 1 and change <= prm.outer_tol * scale:
                break
        else:
            raise OuterNoConvergence(
                f"outer coupling did not converge in {prm.outer_max} passes", updates
            )

        u_next, p_next, rep = self.project_velocity(u_hat, state.p)
        reports.append(rep)
        if not np.max(np.abs(phi_new[g.block])) < 1.0:
            raise PositivityBreach("accepted phase field left (-1, 1)")
        new = SimState(state.n + 1, phi_new, phi_n, u_next, u_n, p_next, mu, state.mass0)
        mon = state_monitors(g, new, prm)
        diag = StepDiagnostics(
            step=new.n,
            time=new.n * tau,
            outer_iters=k,
            newton_iters=newton_iters,
            damping_events=damping,
            min_alpha=min_alpha,
            mass=mon["mass"],
            mass_drift=mon["mass_drift"],
            phi_min=mon["phi_min"],
            phi_max=mon["phi_max"],
            energy=mon["energy"],
            div_inf=mon["div_inf"],
            outer_updates=updates,
            reports=reports,
        )
        return new, diag


@lru_cache(maxsize=8)
def integrator(params: SchemeParams) -> CHNSIntegrator:
    """Shared integrator (and its cached factorizations) for ``params``."""
    return CHNSIntegrator(params)


def init_history(phi0, u0, params: SchemeParams, sources=None, use_exact=True) -> SimState:
    return integrator(params).init_history(phi0, u0, sources, use_exact)


def step(state: SimState, params: SchemeParams, sources=None):
    return integrator(params).step(state, sources)


def solve_ch_newton(phi_n, phi_nm1, u_hat, u_n, params: SchemeParams, src=None, guess=None):
    return integrator(params).solve_ch_newton(phi_n, phi_nm1, u_hat, u_n, src, guess)


def solve_momentum(u_n, u_nm1, p_n, phi_tilde, mu, params: SchemeParams, src=None):
    return integrator(params).solve_momentum(u_n, u_nm1, p_n, phi_tilde, mu, src)[0]


def project_velocity(u_hat, p_n, params: SchemeParams):
    u, p, _ = integrator(params).project_velocity(u_hat, p_n)
    return u, p


def run(state: SimState, params: SchemeParams, nsteps: int, sources=None, callback=None):
    """Take ``nsteps`` steps; ``callback(state, diag)`` is called after each."""
    integ = integrator(params)
    for _ in range(nsteps):
        state, diag = integ.step(state, sources)
        if callback is not None:
            callback(state, diag)
    return state


__all__ = [
    "SchemeParams",
    "SourceTerms",
    "SimState",
    "StepDiagnostics",
    "NewtonLog",
    "CHNSIntegrator",
    "integrator",
    "init_history",
    "step",
    "solve_ch_newton",
    "solve_momentum",
    "project_velocity",
    "run",
    "state_monitors",
]
