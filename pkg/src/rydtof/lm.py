"""Levenberg-Marquardt least squares with analytic Jacobians.

Minimises ``0.5 * sum(r(p)**2)``. Each step solves the damped normal
equations ``(J^T J + lam * D) dp = -J^T r`` with Marquardt scaling ``D``,
the running maximum of ``diag(J^T J)``. The damping follows Nielsen's
gain-ratio schedule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NonConvergence


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    residual: np.ndarray
    jac: np.ndarray
    iterations: int
    converged: bool

    def covariance(self, scale: bool = True) -> np.ndarray:
        """``(J^T J)^-1``, optionally times the residual variance ``cost*2/(m-n)``."""
        m, n = self.jac.shape
        cov = np.linalg.pinv(self.jac.T @ self.jac)
        if scale:
            dof = m - n
            cov = cov * (2.0 * self.cost / dof if dof > 0 else np.nan)
        return 0.5 * (cov + cov.T)


def levenberg_marquardt(fun: Callable, jac: Callable, p0, args: tuple = (), xtol: float = 1e-8,
                        gtol: float = 1e-14, max_iter: int = 200, lam0: float = 1e-3) -> LMResult:
    """Minimise the residual vector ``fun(p, *args)``.

    Parameters
    ----------
    fun, jac : callable
        Residuals, shape (m,), and their Jacobian, shape (m, n).
    xtol : float
        Stop when ``|dp| <= xtol * (|p| + xtol)`` after an accepted step.
    gtol : float
        Stop when the scaled gradient ``max|J^T r| / (|J|^2 + |r|^2)`` is below this.

    Raises
    ------
    NonConvergence
        If neither criterion is met within ``max_iter`` iterations.
    """
    p = np.array(p0, dtype=float)
    r = np.asarray(fun(p, *args), dtype=float)
    if not np.all(np.isfinite(r)):
        raise NonConvergence("residuals are not finite at the starting point")
    J = np.asarray(jac(p, *args), dtype=float)
    cost = 0.5 * float(r @ r)
    D = np.maximum(np.einsum("ij,ij->j", J, J), np.finfo(float).tiny)
    lam, nu = lam0, 2.0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        if np.max(np.abs(g)) <= gtol * (float(np.sum(J * J)) + 2 * cost + np.finfo(float).tiny):
            return LMResult(p, cost, r, J, it - 1, True)
        # augmented system is better conditioned than the normal equations
        A = np.vstack([J, np.diag(np.sqrt(lam * D))])
        b = np.concatenate([-r, np.zeros(p.size)])
        dp = np.linalg.lstsq(A, b, rcond=None)[0]
        p_new = p + dp
        r_new = np.asarray(fun(p_new, *args), dtype=float)
        cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        predicted = -(g @ dp) - 0.5 * float(np.sum((J @ dp) ** 2))
        rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
        if cost_new <= cost and (rho > 0 or cost_new == cost):
            p, r, cost = p_new, r_new, cost_new
            J = np.asarray(jac(p, *args), dtype=float)
            D = np.maximum(D, np.einsum("ij,ij->j", J, J))
            lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            if np.linalg.norm(dp) <= xtol * (np.linalg.norm(p) + xtol) or cost == 0.0:
                return LMResult(p, cost, r, J, it, True)
        else:
            lam *= nu
            nu *= 2.0
            if lam > 1e16:
                # no downhill step exists at machine precision
                return LMResult(p, cost, r, J, it, True)
    raise NonConvergence(f"no convergence within {max_iter} iterations")


def fit_with_restarts(fun: Callable, jac: Callable, p0, args: tuple = (), restarts: int = 5,
                      jitter: float = 0.1, seed: int = 0, **kw) -> LMResult:
    """Run :func:`levenberg_marquardt`; on failure retry from jittered starts.

    Jitter is multiplicative, ``p0 * (1 + jitter * N(0, 1))``. The best
    converged restart (lowest cost) is returned.
    """
    try:
        return levenberg_marquardt(fun, jac, p0, args, **kw)
    except NonConvergence as first:
        err = first
    rng = np.random.default_rng(seed)
    best = None
    p0 = np.asarray(p0, dtype=float)
    for _ in range(restarts):
        start = p0 * (1.0 + jitter * rng.standard_normal(p0.size))
        try:
            res = levenberg_marquardt(fun, jac, start, args, **kw)
        except NonConvergence as exc:
            err = exc
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise NonConvergence(f"{err} (after {restarts} jittered restarts)")
    return best
