"""Nelder-Mead driver with restarts, shared by the likelihood fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    converged: bool
    nfev: int
    nit: int


def nelder_mead(fun, x0, step=0.1, xatol=1e-8, fatol=1e-12, maxiter=None,
                restarts=3, adaptive=None) -> SimplexResult:
    """Minimize ``fun`` from ``x0``.

    Convergence is declared once the simplex diameter falls below ``xatol``
    (or ``maxiter`` = 400 * dim iterations are used).  The search is
    restarted from the best vertex with a fresh simplex until a restart no
    longer improves the objective, which guards against simplex collapse.
    Non-finite objective values are treated as +inf.
    """
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    if maxiter is None:
        maxiter = 400 * d
    if adaptive is None:
        adaptive = d > 4

    def safe(x):
        v = fun(x)
        return v if np.isfinite(v) else np.inf

    steps = np.broadcast_to(np.asarray(step, dtype=float), (d,))
    x, fx = x0, safe(x0)
    nfev = nit = 0
    converged = False
    for _ in range(restarts + 1):
        simplex = np.vstack([x, x + np.diag(steps)])
        res = minimize(safe, x, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "xatol": xatol,
                                "fatol": fatol, "maxiter": maxiter,
                                "maxfev": 4 * maxiter, "adaptive": adaptive})
        nfev += res.nfev
        nit += res.nit
        improved = res.fun < fx - 1e-10
        if res.fun <= fx:
            x, fx = res.x, float(res.fun)
        converged = bool(res.success)
        if not improved:
            break
        # later restarts only need to probe locally
        steps = np.maximum(steps * 0.1, 1e-4)
    return SimplexResult(np.asarray(x, dtype=float), fx, converged, nfev, nit)
