"""Matrix-free linear solvers over flat vectors.

``solve_spd`` is a preconditioned conjugate gradient that can keep every iterate
in the mean-zero subspace (the nullspace of the Neumann/periodic Laplacian).
``solve_general`` wraps SciPy's BiCGStab and adds a true-residual certificate
plus one restart on breakdown.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse.linalg as spla

from .errors import Breakdown, NonZeroMean, NoConvergence

log = logging.getLogger(__name__)


@dataclass
class LinearOperator:
    """A linear map given by its action.

    ``preconditioner`` (if given) approximates the inverse; otherwise the
    inverse of ``diagonal`` is used when that is given.
    """

    apply: Callable[[np.ndarray], np.ndarray]
    symmetric: bool = False
    diagonal: Optional[np.ndarray] = None
    preconditioner: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x):
        return self.apply(x)

    def inverse_guess(self) -> Optional[Callable]:
        if self.preconditioner is not None:
            return self.preconditioner
        if self.diagonal is not None:
            inv = 1.0 / self.diagonal
            return lambda r: inv * r
        return None


@dataclass
class SolveReport:
    iterations: int
    final_residual: float  # ||op(x) - rhs|| / ||rhs||
    converged: bool


def _relres(op, x, b, bnorm):
    return float(np.linalg.norm(op.apply(x) - b) / bnorm)


def solve_spd(op: LinearOperator, rhs, tol=1e-11, max_iter=1000, project_mean=False, x0=None):
    """Preconditioned CG for a symmetric positive (semi)definite ``op``.

    With ``project_mean`` the right side must be mean-zero, every iterate is
    projected onto the mean-zero subspace and so is the returned solution.

    Returns ``(x, SolveReport)``; raises :class:`NoConvergence` after ``max_iter``.
    """
    b = np.asarray(rhs, dtype=float)
    bnorm = np.linalg.norm(b)
    if project_mean:
        rms = bnorm / np.sqrt(b.size)
        if abs(b.mean()) > 1e-12 * max(rms, np.finfo(float).tiny):
            raise NonZeroMean(f"rhs mean {b.mean():.3e} exceeds 1e-12 * rms {rms:.3e}")
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, True)

    def proj(v):
        return v - v.mean() if project_mean else v

    M = op.inverse_guess() or (lambda r: r)
    x = np.zeros_like(b) if x0 is None else proj(np.array(x0, dtype=float))
    r = proj(b - op.apply(x))
    z = proj(M(r))
    p = z.copy()
    rz = r @ z
    it = 0
    while it < max_iter:
        if np.linalg.norm(r) <= tol * bnorm:
            true_res = _relres(op, x, b, bnorm)
            if true_res <= tol:
                return x, SolveReport(it, true_res, True)
            r = proj(b - op.apply(x))  # recurrence drifted; restart directions
            z = proj(M(r))
            p = z.copy()
            rz = r @ z
        it += 1
        Ap = op.apply(p)
        pAp = p @ Ap
        if pAp <= 0.0:
            break
        alpha = rz / pAp
        x += alpha * p
        r = proj(r - alpha * Ap)
        z = proj(M(r))
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    true_res = _relres(op, x, b, bnorm)
    report = SolveReport(it, true_res, true_res <= tol)
    if report.converged:
        return x, report
    raise NoConvergence(f"CG stalled at relative residual {true_res:.3e} after {it} iterations", report)


def solve_general(op: LinearOperator, rhs, tol=1e-10, max_iter=1000, x0=None, atol=0.0):
    """BiCGStab (SciPy) with an optional preconditioner from ``op``.

    Converged means ``||op(x) - rhs|| <= max(tol * ||rhs||, atol)``, judged on
    the recomputed true residual; ``atol`` lets callers accept right sides
    that already sit at round-off level.  One restart
    from a slightly perturbed start is attempted on breakdown or if the
    recurrence residual disagrees with the true one.
    """
    b = np.asarray(rhs, dtype=float)
    n = b.size
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, True)
    A = spla.LinearOperator((n, n), matvec=op.apply, dtype=float)
    Minv = op.inverse_guess()
    M = None if Minv is None else spla.LinearOperator((n, n), matvec=Minv, dtype=float)
    x = None if x0 is None else np.array(x0, dtype=float)
    target = max(tol, atol / bnorm)
    total = 0
    info = 0
    for attempt in range(2):
        count = [0]

        def cb(_xk):
            count[0] += 1

        x, info = spla.bicgstab(A, b, x0=x, rtol=target, atol=0.0, maxiter=max_iter, M=M, callback=cb)
        total += count[0]
        res = _relres(op, x, b, bnorm)
        if res <= target:
            return x, SolveReport(total, res, True)
        if info > 0 and attempt == 0 and res > 1e3 * target:
            break  # genuinely out of iterations
        log.debug("bicgstab restart: info=%s residual=%.3e", info, res)
        rng = np.random.default_rng(attempt)
        x = x + 1e-8 * np.linalg.norm(x) / np.sqrt(n) * rng.standard_normal(n)
    report = SolveReport(total, _relres(op, x, b, bnorm), False)
    if info < 0:
        raise Breakdown(f"BiCGStab breakdown (info={info})", report)
    raise NoConvergence(
        f"BiCGStab reached relative residual {report.final_residual:.3e} > {target:.1e}", report
    )
