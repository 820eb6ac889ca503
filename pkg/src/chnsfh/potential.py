"""Modified Crank-Nicolson treatment of the logarithmic potential.

The singular part enters through the secant slope ``F_a(x)`` of
``G(x) = x ln x``; an extra ``tau (N(phi^{n+1}) - N(phi^n))`` term with
``N(phi) = ln(1+phi) - ln(1-phi)`` keeps iterates away from +-1.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError, OutOfBounds
from .grid import Grid


class Regularization(str, Enum):
    LOG_DIFFERENCE = "log_difference"


@dataclass(frozen=True)
class PotentialParams:
    theta0: float = 3.0
    eps: float = 0.1
    reg_kind: Regularization = Regularization.LOG_DIFFERENCE
    diag_switch_tol: float = 1e-7

    def __post_init__(self):
        if not (self.theta0 > 0 and self.eps > 0):
            raise ValueError("theta0 and eps must be positive")
        if not (0.0 < self.diag_switch_tol <= 1e-4):
            raise ValueError("diag_switch_tol must lie in (0, 1e-4]")
        object.__setattr__(self, "reg_kind", Regularization(self.reg_kind))


# relative distance below which F_a' switches to its Taylor series; the closed
# form loses about 1e-16/t relative accuracy to cancellation
_DERIV_SWITCH = 1e-3


def _check_positive(a, x):
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(a <= 0) or np.any(x <= 0):
        raise DomainError("F_a(x) needs a > 0 and x > 0")
    return np.broadcast_arrays(a, x)


def F_diffquot(a, x, diag_switch_tol=1e-7):
    """Secant slope ``(G(x) - G(a)) / (x - a)`` of ``G(x) = x ln x``.

    The slope is symmetric in ``(a, x)``.  Off the diagonal it is evaluated
    as ``ln hi + log1p(t)/t`` with ``hi = max(a, x)``, ``lo = min(a, x)`` and
    ``t = (hi - lo)/lo``, which avoids the cancellation that ``x ln x - a ln a``
    suffers when one argument is tiny.  When ``|x - a| < diag_switch_tol * max(a, x)`` the series
    ``ln a + 1 + d/(2a) - d^2/(6a^2)`` (``d = x - a``) is used instead.
    """
    a, x = _check_positive(a, x)
    d = x - a
    near = np.abs(d) < diag_switch_tol * np.maximum(a, x)
    out = np.empty(np.shape(a))
    far = ~near
    hi, lo = np.maximum(a[far], x[far]), np.minimum(a[far], x[far])
    t = (hi - lo) / lo
    out[far] = np.log(hi) + np.log1p(t) / t
    an, dn = a[near], d[near]
    out[near] = np.log(an) + 1.0 + dn / (2.0 * an) - dn**2 / (6.0 * an**2)
    return out if out.ndim else float(out)


def F_diffquot_dx(a, x, diag_switch_tol=1e-7):
    """``d/dx F_a(x) = (t - log1p(t)) / (a t^2)`` with ``t = (x - a)/a``; nonnegative."""
    a, x = _check_positive(a, x)
    t = (x - a) / a
    near = np.abs(t) < max(_DERIV_SWITCH, diag_switch_tol)
    out = np.empty(np.shape(a))
    tf, af = t[~near], a[~near]
    out[~near] = (tf - np.log1p(tf)) / (af * tf**2)
    tn = t[near]
    # (1/a) sum_k (-1)^k t^k / (k+2), k = 0..5
    series = 0.5 + tn * (-1 / 3 + tn * (1 / 4 + tn * (-1 / 5 + tn * (1 / 6 - tn / 7))))
    out[near] = series / a[near]
    return out if out.ndim else float(out)


def _check_phi(phi):
    phi = np.asarray(phi, dtype=float)
    if np.any(np.abs(phi) >= 1.0):
        raise OutOfBounds("regularization needs |phi| < 1")
    return phi


def N_reg(phi):
    phi = _check_phi(phi)
    return np.log1p(phi) - np.log1p(-phi)


def N_reg_prime(phi):
    phi = _check_phi(phi)
    return 1.0 / (1.0 + phi) + 1.0 / (1.0 - phi)


def chemical_potential(grid: Grid, phi_next, phi_n, phi_nm1, tau, params: PotentialParams):
    """Cell-centred ``mu^{n+1/2}`` of the modified Crank-Nicolson scheme.

    Inputs must be ghost-filled; the result is ghost-filled.
    """
    for f in (phi_next, phi_n, phi_nm1):
        _check_phi(f)
    tol = params.diag_switch_tol
    log_part = F_diffquot(1.0 + phi_n, 1.0 + phi_next, tol) - F_diffquot(1.0 - phi_n, 1.0 - phi_next, tol)
    surface = grid.fill(grid.lap(0.75 * phi_next + 0.25 * phi_nm1), inplace=True)
    mu = (
        log_part
        - params.theta0 * (1.5 * phi_n - 0.5 * phi_nm1)
        - params.eps**2 * surface
        + tau * (N_reg(phi_next) - N_reg(phi_n))
    )
    return mu


def chemical_potential_linearization(grid: Grid, phi_next, phi_n, tau, params: PotentialParams):
    """Derivative of :func:`chemical_potential` with respect to ``phi_next``.

    Returns ``(diag, lap_coeff)``: the Jacobian is
    ``diag * I + lap_coeff * lap_h`` with ``lap_coeff = -(3/4) eps^2``.
    ``diag`` is strictly positive.
    """
    _check_phi(phi_next)
    _check_phi(phi_n)
    tol = params.diag_switch_tol
    diag = (
        F_diffquot_dx(1.0 + phi_n, 1.0 + phi_next, tol)
        + F_diffquot_dx(1.0 - phi_n, 1.0 - phi_next, tol)
        + tau * N_reg_prime(phi_next)
    )
    return diag, -0.75 * params.eps**2
