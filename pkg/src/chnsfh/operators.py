"""Nonlinear grid operators: skew convection, coupling terms and energies."""
from __future__ import annotations

import numpy as np

from .errors import OutOfBounds
from .grid import Grid, MacVelocity


def convect_velocity(grid: Grid, adv: MacVelocity, v: MacVelocity) -> MacVelocity:
    """Skew-symmetric convection ``b_h(adv, v) = (adv . grad v + div(v adv^T)) / 2``.

    Both arguments must be ghost-filled.  Uses centred long-stencil
    differences and the four-point averages of the cross components, so that
    ``<v, b_h(adv, v)>_1 = 0`` holds to round-off.
    """
    Dx = lambda f: grid.diff_long(0, f)  # noqa: E731
    Dy = lambda f: grid.diff_long(1, f)  # noqa: E731
    ay_ew = grid.average("Axy_y", adv.y)
    ax_ns = grid.average("Axy_x", adv.x)

    bx = adv.x * Dx(v.x) + ay_ew * Dy(v.x) + Dx(adv.x * v.x) + Dy(ay_ew * v.x)
    by = ax_ns * Dx(v.y) + adv.y * Dy(v.y) + Dx(ax_ns * v.y) + Dy(adv.y * v.y)
    return grid.fill_velocity(MacVelocity(0.5 * bx, 0.5 * by), inplace=True)


def trilinear_b(grid: Grid, u: MacVelocity, v: MacVelocity, w: MacVelocity) -> float:
    return grid.inner(convect_velocity(grid, u, v), w)


def phi_grad_mu(grid: Grid, phi: np.ndarray, mu: np.ndarray) -> MacVelocity:
    """Edge-centred ``A_h phi grad_h mu`` (the capillary force without ``-gamma``)."""
    f = MacVelocity(
        grid.diff("center_x", mu) * grid.average("Ax", phi),
        grid.diff("center_y", mu) * grid.average("Ay", phi),
    )
    return grid.fill_velocity(f, inplace=True)


def div_phi_u(grid: Grid, phi: np.ndarray, u: MacVelocity) -> np.ndarray:
    """Cell-centred flux divergence ``div_h(A_h phi u)``."""
    out = grid.diff("ew_x", u.x * grid.average("Ax", phi)) + grid.diff(
        "ns_y", u.y * grid.average("Ay", phi)
    )
    return grid.fill(out, inplace=True)


def check_bounds(grid: Grid, phi: np.ndarray, name="phi"):
    m = grid.norm(phi, np.inf)
    if not m < 1.0:
        raise OutOfBounds(f"||{name}||_inf = {m!r} is not < 1")


def xlogx(x):
    """``x ln x`` with the limit value 0 at ``x = 0``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


def mixing_density(phi, theta0):
    return xlogx(1.0 + phi) + xlogx(1.0 - phi) - 0.5 * theta0 * phi**2


def flory_huggins_energy(grid: Grid, phi: np.ndarray, eps: float, theta0: float) -> float:
    """Discrete Flory-Huggins free energy with an edge-staggered gradient term."""
    check_bounds(grid, phi)
    phi = grid.fill(phi)
    bulk = grid.mean(mixing_density(phi, theta0))
    return bulk + 0.5 * eps**2 * grid.grad_norm_sq(phi)


def total_energy(grid: Grid, phi, u: MacVelocity, eps, theta0, gamma) -> float:
    """Free energy plus kinetic energy ``||u||^2 / (2 gamma)``."""
    return flory_huggins_energy(grid, phi, eps, theta0) + grid.inner(u, u) / (2.0 * gamma)
