"""Randomized quantile residuals and adaptive truncation cutoffs."""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import family as fam
from .errors import DomainError
from .model import Dataset, FamilySpec, ThetaEstimate

log = logging.getLogger(__name__)


class CutoffWarning(RuntimeWarning):
    pass


class Flag(str, enum.Enum):
    KEPT = "kept"
    BELOW = "below"
    ABOVE = "above"


@dataclass
class RqrDiagnostics:
    z: np.ndarray
    u: np.ndarray | None
    a_tilde: float | None = None
    b_tilde: float | None = None
    zeta1: float = 0.05
    zeta2: float = 0.95

    @property
    def flags(self) -> list[Flag]:
        if self.a_tilde is None or self.b_tilde is None:
            raise DomainError("cutoffs have not been computed")
        out = []
        for zi in self.z:
            if zi < self.a_tilde:
                out.append(Flag.BELOW)
            elif zi > self.b_tilde:
                out.append(Flag.ABOVE)
            else:
                out.append(Flag.KEPT)
        return out

    def with_cutoffs(self, zeta1=0.05, zeta2=0.95) -> "RqrDiagnostics":
        a, b = adaptive_cutoffs(self.z, zeta1, zeta2)
        return RqrDiagnostics(self.z, self.u, a, b, zeta1, zeta2)

    def qq_table(self):
        """Sorted residuals against uniform plotting positions."""
        zs = np.sort(self.z)
        n = zs.size
        return (np.arange(1, n + 1) - 0.5) / n, zs


def rqr_compute(theta: ThetaEstimate, data: Dataset, family: FamilySpec,
                u=None, rng=None) -> RqrDiagnostics:
    """z_i = F(y_i) (continuous) or F(y_i) − u_i f(y_i) (discrete).

    In the discrete case ``u`` is used verbatim when given, otherwise drawn
    from ``rng``; it is stored on the result so the same jitter can be reused.
    """
    mu = theta.mu(data.X, family)
    if family.discrete:
        if u is None:
            if rng is None:
                raise DomainError("discrete residuals need u or an rng")
            u = rng.uniform(size=data.n)
        u = np.asarray(u, dtype=float)
        if u.shape != (data.n,):
            raise DomainError(f"u must have length {data.n}")
        pmf, cdf = fam.nb_pmf_cdf(data.y, mu, np.full(data.n, theta.alpha))
        z = np.clip(cdf - u * pmf, 0.0, 1.0)
        return RqrDiagnostics(z, u)
    mu = np.clip(mu, 1e-12, 1 - 1e-12)
    return RqrDiagnostics(fam.beta_cdf(data.y, mu, theta.alpha), None)


def _upper_feasible(zs, n, t, zeta2):
    """Whether cutoff ``t`` satisfies inf_{z >= ζ₂} (F^R_{n,t}(z) − z) >= 0.

    F^R_{n,t}(z) = F_n(z)/F_n(t) for z <= t and 1 above.  Between jumps
    F^R − z decreases, so the infimum is attained at the anchor ζ₂ or as a
    left limit F_n(z−)/F_n(t) at a jump point z in (ζ₂, t].
    """
    if t < zeta2:
        return True
    Ft = np.searchsorted(zs, t, side="right") / n
    if Ft == 0:
        return True
    pts = zs[(zs > zeta2) & (zs <= t)]
    F_left = np.searchsorted(zs, pts, side="left") / n
    if np.any(F_left / Ft < pts):
        return False
    F_anchor = np.searchsorted(zs, zeta2, side="right") / n
    return F_anchor / Ft >= zeta2


def _lower_feasible(zs, n, t, zeta1):
    """Whether cutoff ``t`` satisfies sup_{z <= ζ₁} (F^L_{n,t}(z) − z) <= 0.

    F^L_{n,t}(z) = (F_n(z) − F_n(t−))/(1 − F_n(t−)) for z >= t and 0 below,
    i.e. the empirical cdf of the residuals at or above ``t``.  The supremum
    is attained at a jump point in [t, ζ₁] or at the anchor ζ₁.
    """
    if t > zeta1:
        return True
    Ft = np.searchsorted(zs, t, side="left") / n
    if Ft >= 1.0:
        return True
    pts = zs[(zs >= t) & (zs <= zeta1)]
    Fz = np.searchsorted(zs, pts, side="right") / n
    if np.any((Fz - Ft) / (1.0 - Ft) > pts):
        return False
    F_anchor = np.searchsorted(zs, zeta1, side="right") / n
    return (F_anchor - Ft) / (1.0 - Ft) <= zeta1


def adaptive_cutoffs(z, zeta1=0.05, zeta2=0.95):
    """Adaptive cutoffs (ã, b̃) from residuals ``z``.

    b̃ is the largest candidate t in {0, z_(1), …, z_(n), 1} whose
    right-truncated empirical cdf stays at or above the uniform cdf on
    [ζ₂, 1]; ã is the smallest candidate whose left-truncated empirical cdf
    stays at or below it on [0, ζ₁].  Feasibility is monotone in t, so both
    are found by bisection over the sorted candidates.
    """
    z = np.asarray(z, dtype=float)
    if not (0.0 <= zeta1 < zeta2 <= 1.0):
        raise DomainError("need 0 <= zeta1 < zeta2 <= 1")
    n = z.size
    if n == 0:
        raise DomainError("no residuals")
    if n < 20:
        log.debug("adaptive cutoffs with only %d residuals", n)
    zs = np.sort(z)
    cands = np.concatenate([[0.0], zs, [1.0]])

    # largest feasible candidate; cands[0] = 0 is always feasible for zeta2 > 0
    lo, hi = 0, cands.size
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _upper_feasible(zs, n, cands[mid], zeta2):
            lo = mid
        else:
            hi = mid
    b = float(cands[lo]) if _upper_feasible(zs, n, cands[lo], zeta2) else 0.0

    # smallest feasible candidate; cands[-1] = 1 is always feasible for zeta1 < 1
    lo, hi = -1, cands.size - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _lower_feasible(zs, n, cands[mid], zeta1):
            hi = mid
        else:
            lo = mid
    a = float(cands[hi])

    if not a < b:
        warnings.warn("no feasible cutoffs; truncation disabled", CutoffWarning, stacklevel=2)
        return 0.0, 1.0
    return a, b


def cutoffs_bruteforce(z, zeta1=0.05, zeta2=0.95, n_dense=20001):
    """Reference cutoffs by scanning every candidate against a dense z grid.

    The inner inf/sup is approximated on a fine grid of z values plus
    points just left of each jump; used only to check :func:`adaptive_cutoffs`.
    """
    zs = np.sort(np.asarray(z, dtype=float))
    n = zs.size
    cands = np.concatenate([[0.0], zs, [1.0]])
    grid = np.unique(np.concatenate([np.linspace(0, 1, n_dense), zs,
                                     np.nextafter(zs, -np.inf), [zeta1, zeta2]]).clip(0.0, 1.0))
    Fg = np.searchsorted(zs, grid, side="right") / n

    def upper_ok(t):
        Ft = np.count_nonzero(zs <= t) / n
        g = grid >= zeta2
        FR = np.where(grid[g] <= t, Fg[g] / Ft if Ft > 0 else 1.0, 1.0)
        return np.all(FR - grid[g] >= 0)

    def lower_ok(t):
        Ft = np.count_nonzero(zs < t) / n
        g = grid <= zeta1
        FL = np.where(grid[g] >= t, (Fg[g] - Ft) / (1 - Ft) if Ft < 1 else 0.0, 0.0)
        return np.all(FL - grid[g] <= 0)

    b = max(t for t in cands if upper_ok(t))
    a = min(t for t in cands if lower_ok(t))
    if not a < b:
        return 0.0, 1.0
    return a, b


@dataclass
class ShrinkageRow:
    n: int
    median_a_sqrt_n: float
    median_1mb_sqrt_n: float
    median_a: float
    median_1mb: float


def cutoff_shrinkage_check(n_list, reps, seed, theta_fn=None, beta0=None, alpha0=0.8,
                           zeta1=0.05, zeta2=0.95):
    """Empirical √n-rate check of the adaptive cutoffs under the clean model.

    ``theta_fn(data, rng)`` supplies the estimate the residuals are based
    on (default: the true parameters).  Returns the per-n rows and a flag
    that is True when √n-scaled medians grow more than 2x from the first
    n ≥ 400 to the largest n.
    """
    from .simulate import SimConfig, gen_sample

    rows = []
    for n in n_list:
        cfg = SimConfig(n=n, reps=reps, seed=seed,
                        beta0=tuple(beta0) if beta0 is not None else SimConfig.beta0,
                        alpha0=alpha0)
        a_vals, b_vals = [], []
        for r in range(reps):
            data, rng = gen_sample(cfg, r, return_rng=True)
            theta = (ThetaEstimate(cfg.beta0, cfg.alpha0) if theta_fn is None
                     else theta_fn(data, rng))
            diag = rqr_compute(theta, data, fam_nb(), rng=rng)
            a, b = adaptive_cutoffs(diag.z, zeta1, zeta2)
            a_vals.append(a)
            b_vals.append(1.0 - b)
        a_vals, b_vals = np.asarray(a_vals), np.asarray(b_vals)
        rows.append(ShrinkageRow(n, float(np.median(a_vals) * np.sqrt(n)),
                                 float(np.median(b_vals) * np.sqrt(n)),
                                 float(np.median(a_vals)), float(np.median(b_vals))))
    ref = [r for r in rows if r.n >= 400] or rows
    first, last = ref[0], rows[-1]
    failed = (last.median_a_sqrt_n > 2 * max(first.median_a_sqrt_n, 1e-12)
              or last.median_1mb_sqrt_n > 2 * max(first.median_1mb_sqrt_n, 1e-12))
    return rows, failed


def fam_nb():
    from .model import NB
    return NB
