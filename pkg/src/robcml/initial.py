"""Robust initial estimator: MRC direction, weighted MT fit and α equation.

Given the slope direction γ̃, the linear index is approximated by
``v = γ̃'x*`` and the simple model ``Y | v ~ F(h(b0 + b1 v), α)`` is fitted
with a weighted MT estimator for each α on a fixed grid.  Each grid fit is
followed by the bounded M-equation Σ ψ(y, μ, α) = 0 for α, and the fixed
point α = α̃*(α) is located on the grid.
"""

from __future__ import annotations

import functools
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from . import _kernels
from . import family as fam
from .errors import DegenerateDataError, DomainError
from .model import Dataset, FamilySpec, Kind, ThetaEstimate
from .mrc import GridConfig, mrc_fit

log = logging.getLogger(__name__)

# Approximate sd of t(y, α).  NB rows are indexed by α; Beta rows by the
# precision 1/α (the Beta transform is written in terms of the precision).
NB_TABLE = (
    (0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 1.0, 1.1, 1.2, 1.3),
    (0.41, 0.40, 0.39, 0.37, 0.36, 0.35, 0.33, 0.32, 0.30, 0.29, 0.27, 0.26, 0.24),
)
BETA_TABLE = (
    (5, 6, 7, 8, 9, 10, 15, 20, 25, 30, 35, 40, 45, 50),
    (0.42, 0.43, 0.43, 0.44, 0.45, 0.45, 0.47, 0.48, 0.48, 0.49, 0.49, 0.49, 0.49, 0.49),
)
NB_ALPHA_CAP = 1.3


class MultimodalWarning(RuntimeWarning):
    """The biweight expectation in γ has separated local minima."""


@dataclass(frozen=True)
class TransformTable:
    kind: Kind
    abscissa: tuple
    sigma: tuple

    @classmethod
    def for_family(cls, family: FamilySpec) -> "TransformTable":
        rows = NB_TABLE if family.discrete else BETA_TABLE
        return cls(family.kind, tuple(float(a) for a in rows[0]), rows[1])

    @property
    def alpha_grid(self) -> np.ndarray:
        """Grid of dispersions α (Beta abscissae are precisions, so inverted)."""
        a = np.asarray(self.abscissa)
        return a if self.kind is Kind.NEGATIVE_BINOMIAL else np.sort(1.0 / a)


@dataclass(frozen=True)
class MtConfig:
    """Tuning of the weighted MT stage."""

    c_factor: float = 1.5
    weight_threshold: float = 2.0
    n_starts: int = 3
    psi_clip: float = 0.7
    mrc: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if self.c_factor <= 0 or self.weight_threshold <= 0 or self.psi_clip <= 0:
            raise DomainError("MT tuning constants must be positive")


# --------------------------------------------------------------------------
# transform, tuning table, loss
# --------------------------------------------------------------------------

def vst(y, alpha, family: FamilySpec):
    """Variance-stabilizing transform t(y, α).

    NB:   sqrt(1/α − 1/2) · arcsinh(sqrt((y + 3/8) / (1/α − 3/4))), with α
          capped at 1.3 so the inner ratio stays positive.
    Beta: sqrt(1 + 1/α) · arcsin(sqrt(y)).
    """
    y = np.asarray(y, dtype=float)
    if family.discrete:
        a = min(float(alpha), NB_ALPHA_CAP)
        inv = 1.0 / a
        return np.sqrt(inv - 0.5) * np.arcsinh(np.sqrt((y + 0.375) / (inv - 0.75)))
    return np.sqrt(1.0 + 1.0 / alpha) * np.arcsin(np.sqrt(y))


def sigma_of_alpha(alpha, family: FamilySpec) -> float:
    """Piecewise-linear interpolation of the sd table, clamped at the ends."""
    table = TransformTable.for_family(family)
    x = float(alpha) if family.discrete else 1.0 / float(alpha)
    return float(np.interp(x, table.abscissa, table.sigma))


def biweight_rho(u, c):
    """Tukey biweight: 1 − (1 − (u/c)²)³ inside [−c, c], 1 outside."""
    z = np.asarray(u, dtype=float) / c
    q = 1.0 - np.minimum(z * z, 1.0)
    return 1.0 - q * q * q


def tuning_constant(alpha, family, c_factor=1.5) -> float:
    return c_factor * sigma_of_alpha(alpha, family)


# --------------------------------------------------------------------------
# m(μ, α) = argmin_γ E ρ(t(y, α) − γ)
# --------------------------------------------------------------------------

def _expectation_support(mu, alpha, family, tail=1e-9):
    if family.discrete:
        r = 1.0 / alpha
        p = 1.0 / (1.0 + alpha * mu)
        lo = int(stats.nbinom.ppf(tail * 1e-3, r, p))
        hi = int(stats.nbinom.ppf(1.0 - tail, r, p)) + 1
        k = np.arange(max(lo - 1, 0), hi + 1, dtype=float)
        w = fam.nb_pmf(k, mu, alpha)
        return k, w
    pts, w = fam.support_grid(family, np.array([mu]), alpha)
    return pts[0], w[0]


def _golden(f, lo, hi, tol=1e-9):
    g = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1 = b - g * (b - a)
    x2 = a + g * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - g * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + g * (b - a)
            f2 = f(x2)
    return 0.5 * (a + b)


def m_function(mu, alpha, family: FamilySpec, c=None, n_grid=201, warn=True) -> float:
    """Minimizer over γ of E_{μ,α} ρ_c(t(y, α) − γ).

    A grid over [t(q_0.001), t(q_0.999)] locates the global minimum which is
    then polished by golden-section search.  Separated local minima whose
    values differ by more than 1e-6 raise a :class:`MultimodalWarning`.
    """
    if c is None:
        c = tuning_constant(alpha, family)
    pts, w = _expectation_support(float(mu), float(alpha), family)
    t = vst(pts, alpha, family)
    if family.discrete:
        cdf = np.cumsum(w)
        lo_pt = pts[min(np.searchsorted(cdf, 0.001), pts.size - 1)]
        hi_pt = pts[min(np.searchsorted(cdf, 0.999), pts.size - 1)]
        lo, hi = vst(lo_pt, alpha, family), vst(hi_pt, alpha, family)
    else:
        lo, hi = (vst(fam.beta_quantile(q, mu, alpha), alpha, family) for q in (0.001, 0.999))
    if hi - lo < 1e-12:
        return float(lo)

    def objective(g):
        return float(w @ biweight_rho(t - g, c))

    grid = np.linspace(lo, hi, n_grid)
    vals = w @ biweight_rho(t[:, None] - grid[None, :], c)
    i = int(np.argmin(vals))
    interior = (vals[1:-1] <= vals[:-2]) & (vals[1:-1] <= vals[2:])
    minima = np.flatnonzero(interior) + 1
    if warn and minima.size > 1:
        spread = vals[minima].max() - vals[minima].min()
        far = np.ptp(grid[minima]) > 2 * (grid[1] - grid[0])
        if spread > 1e-6 and far:
            warnings.warn(f"m(mu={mu:.4g}, alpha={alpha:.4g}) objective has several local minima; "
                          "using the global grid minimum", MultimodalWarning, stacklevel=2)
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, n_grid - 1)]
    return _golden(objective, a, b)


_NB_LOGMU = np.arange(-5.0, 7.0 + 1e-9, 0.05)
_BETA_LOGIT = np.arange(-7.0, 7.0 + 1e-9, 0.05)


_TABLE_VERSION = 1


def _cache_dir():
    root = os.environ.get("ROBCML_CACHE_DIR")
    if root is None:
        root = os.path.join(os.environ.get("XDG_CACHE_HOME", os.path.expanduser("~/.cache")), "robcml")
    return root


@functools.lru_cache(maxsize=64)
def _m_table(kind: Kind, alpha: float, c: float):
    """m over the η grid; memoized in-process and on disk (tables are data-free)."""
    path = os.path.join(_cache_dir(), f"m_v{_TABLE_VERSION}_{kind.value}_{alpha:.12g}_{c:.12g}.npz")
    try:
        with np.load(path) as z:
            return z["eta"], z["m"]
    except (OSError, KeyError, ValueError):
        pass
    eta, m = _build_m_table(kind, alpha, c)
    try:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = f"{path}.{os.getpid()}.tmp.npz"
        np.savez(tmp, eta=eta, m=m)
        os.replace(tmp, path)
    except OSError:
        log.debug("could not write m-table cache %s", path)
    return eta, m


def _build_m_table(kind: Kind, alpha: float, c: float):
    family = FamilySpec(kind)
    eta = _NB_LOGMU if family.discrete else _BETA_LOGIT
    mu = family.mean(eta)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MultimodalWarning)
        m = np.array([m_function(u, alpha, family, c=c, n_grid=81) for u in mu])
    if caught:
        log.debug("m-table alpha=%.3g: %d multimodal points", alpha, len(caught))
    return eta, m


class MFunction:
    """Tabulated m(h(η), α) as a function of the linear predictor η.

    Linear interpolation on a 0.05-spaced grid of η; values beyond the grid
    are held at the end points.
    """

    def __init__(self, alpha, family: FamilySpec, c=None):
        self.alpha = float(alpha)
        self.family = family
        self.c = float(tuning_constant(alpha, family) if c is None else c)
        self.eta, self.m = _m_table(family.kind, self.alpha, self.c)

    def __call__(self, eta):
        return np.interp(eta, self.eta, self.m)

    def inverse(self, value):
        """Smallest grid η whose m reaches ``value`` (m is nondecreasing in η)."""
        mono = np.maximum.accumulate(self.m)
        return np.interp(value, mono, self.eta)


# --------------------------------------------------------------------------
# weighted MT fit of the simple model
# --------------------------------------------------------------------------

def covariate_weights(v, threshold=2.0):
    """Hard rejection weights I(|v − median| / mad < threshold)."""
    v = np.asarray(v, dtype=float)
    s = stats.median_abs_deviation(v, scale="normal")
    if s == 0:
        raise DegenerateDataError("mad of the linear index is zero", stage="mt_fit_simple")
    return (np.abs(v - np.median(v)) / s < threshold).astype(float)


@dataclass
class MtFit:
    beta1: float
    eta: float
    objective: float
    candidates: list


def mt_objective(params, v, t, w, mfun: MFunction):
    b0, b1 = params
    return float(np.sum(w * biweight_rho(t - mfun(b0 + b1 * v), mfun.c))) / t.size


def mt_fit_simple(v, y, alpha, family: FamilySpec, config: MtConfig | None = None,
                  weights=None, warm=None) -> MtFit:
    """Weighted MT estimate of (intercept, slope) in the one-covariate model.

    ``v = None`` fits the intercept-only location model.  Nelder-Mead is run
    from a 3×3 grid around a Theil-Sen line through the m-inverted
    transformed responses; the best local minimum is returned.  When a
    ``warm`` (intercept, slope) pair is given, only it and the Theil-Sen
    line are used as starts.
    """
    config = config or MtConfig()
    y = np.asarray(y, dtype=float)
    mfun = MFunction(alpha, family, c=tuning_constant(alpha, family, config.c_factor))
    t = vst(y, alpha, family)
    if v is None:
        return _mt_location(t, mfun)
    v = np.asarray(v, dtype=float)
    w = covariate_weights(v, config.weight_threshold) if weights is None else np.asarray(weights, float)
    keep = w > 0
    eta_hat = mfun.inverse(t)
    slope, intercept, *_ = stats.theilslopes(eta_hat[keep], v[keep])
    d0 = 0.3
    d1 = 0.3 * max(abs(slope), 0.2)
    k = config.n_starts
    offs = np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1)
    starts = [(intercept + i * d0, slope + j * d1) for i in offs for j in offs]
    if warm is not None:
        starts = [tuple(warm), (intercept, slope)]

    def f(p):
        return mt_objective(p, v, t, w, mfun)

    best = None
    cands = []
    for s in starts:
        res = optimize.minimize(f, np.asarray(s), method="Nelder-Mead",
                                options={"xatol": 1e-6, "fatol": 1e-10, "maxiter": 800})
        cands.append((float(res.fun), res.x.copy()))
        if best is None or res.fun < best[0]:
            best = (float(res.fun), res.x.copy())
    return MtFit(float(best[1][0]), float(best[1][1]), best[0], cands)


def _mt_location(t, mfun: MFunction) -> MtFit:
    lo, hi = mfun.eta[0], mfun.eta[-1]

    def f(b0):
        return float(np.mean(biweight_rho(t - mfun(b0), mfun.c)))

    grid = np.linspace(lo, hi, 481)
    vals = np.array([f(g) for g in grid])
    i = int(np.argmin(vals))
    b0 = _golden(f, grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)], tol=1e-8)
    return MtFit(b0, 0.0, f(b0), [(f(b0), np.array([b0, 0.0]))])


# --------------------------------------------------------------------------
# bounded M-equation for α
# --------------------------------------------------------------------------

def _clipped_score_moments(mu, alpha, family, clip):
    """Per-mean clip bound c and model mean of the clipped α-score."""
    if family.discrete:
        return _kernels.nb_clipped_score_moments(np.ascontiguousarray(mu, dtype=float),
                                                 float(alpha), float(clip), 1e-12)
    if mu.size > _MOMENT_GRID:
        # both moments are smooth in the mean: tabulate on a logit grid and interpolate
        eta = family.linear(mu)
        grid = np.linspace(eta.min(), eta.max(), _MOMENT_GRID)
        c, e_clip = _beta_clipped_moments(family.mean(grid), alpha, family, clip)
        return np.interp(eta, grid, c), np.interp(eta, grid, e_clip)
    return _beta_clipped_moments(mu, alpha, family, clip)


_MOMENT_GRID = 64


def _beta_clipped_moments(mu, alpha, family, clip):
    pts, w = fam.support_grid(family, mu, alpha)
    s = fam.score_alpha(family, pts, mu[:, None], alpha)
    m1 = np.sum(w * s, axis=1)
    sd = np.sqrt(np.maximum(np.sum(w * s * s, axis=1) - m1**2, 1e-300))
    c = clip * sd
    e_clip = np.sum(w * np.clip(s, -c[:, None], c[:, None]), axis=1) / np.sum(w, axis=1)
    return c, e_clip


def psi_alpha(y, mu, alpha, family: FamilySpec, clip=0.7):
    """Bounded, Fisher-consistent score for α.

    The likelihood score in α is clipped at ``clip`` model standard
    deviations and recentred by its model expectation, so E_{μ,α} ψ = 0
    holds for every μ.  Returns ψ and the bound ``2 c`` on |ψ|.
    """
    y = np.asarray(y, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), y.shape).ravel()
    c, e_clip = _clipped_score_moments(mu, float(alpha), family, clip)
    s = fam.score_alpha(family, y.ravel(), mu, alpha)
    psi = np.clip(s, -c, c) - e_clip
    return psi.reshape(y.shape), (2.0 * c).reshape(y.shape)


def solve_alpha_given_mu(y, mu, family: FamilySpec, bounds, clip=0.7):
    """Root of α ↦ Σ ψ(y_i, μ_i, α) on ``bounds``; ``(alpha, at_boundary)``."""
    lo, hi = bounds

    def total(a):
        return float(np.sum(psi_alpha(y, mu, a, family, clip)[0]))

    f_lo, f_hi = total(lo), total(hi)
    if f_lo * f_hi > 0:
        # ψ sums decrease in α: positive everywhere means α above the range
        return (hi if f_hi > 0 else lo), True
    return optimize.brentq(total, lo, hi, xtol=1e-8), False


@dataclass
class AlphaSearch:
    alpha: float
    beta1: float
    eta: float
    grid: np.ndarray
    alpha_star: np.ndarray
    fits: list
    warning: str | None = None


def solve_alpha(v, y, family: FamilySpec, table: TransformTable | None = None,
                config: MtConfig | None = None) -> AlphaSearch:
    """Joint solution of the MT equations and the α equation on the α grid.

    For each grid α the MT fit gives (b0(α), b1(α)); the α-equation is then
    solved with those means, giving α*(α).  The fixed point α = α*(α) is
    found by linear interpolation of α*(α) − α between the two grid points
    that bracket it (or the grid point minimizing |α*(α) − α|).
    """
    config = config or MtConfig()
    table = table or TransformTable.for_family(family)
    grid = table.alpha_grid
    bounds = (float(grid[0]), float(grid[-1]))
    y = np.asarray(y, dtype=float)
    w = None if v is None else covariate_weights(v, config.weight_threshold)
    fits, astar, flags = [], [], []
    warm = None
    for a in grid:
        fit = mt_fit_simple(v, y, a, family, config, weights=w, warm=warm)
        if v is not None:
            warm = (fit.beta1, fit.eta)
        lin = fit.beta1 + (0.0 if v is None else fit.eta * np.asarray(v))
        mu = np.broadcast_to(family.mean(lin), y.shape)
        if not family.discrete:
            mu = np.clip(mu, 1e-9, 1 - 1e-9)
        a_star, edge = solve_alpha_given_mu(y, mu, family, bounds, config.psi_clip)
        fits.append(fit)
        astar.append(a_star)
        flags.append(edge)
    astar = np.asarray(astar)
    diff = astar - grid
    b1 = np.array([f.beta1 for f in fits])
    b2 = np.array([f.eta for f in fits])
    warning = None
    cross = np.flatnonzero(np.sign(diff[:-1]) * np.sign(diff[1:]) <= 0)
    if cross.size:
        # several crossings: take the one with the smallest |diff| pair
        k = cross[np.argmin(np.abs(diff[cross]) + np.abs(diff[cross + 1]))]
        d0, d1 = diff[k], diff[k + 1]
        lam = 0.0 if d0 == d1 else d0 / (d0 - d1)
        alpha = grid[k] + lam * (grid[k + 1] - grid[k])
        beta1 = b1[k] + lam * (b1[k + 1] - b1[k])
        eta = b2[k] + lam * (b2[k + 1] - b2[k])
    else:
        k = int(np.argmin(np.abs(diff)))
        alpha, beta1, eta = grid[k], b1[k], b2[k]
        warning = "alpha equation has no fixed point on the grid; boundary value used"
    if all(flags):
        warning = "alpha equation has no sign change on the grid range"
    if warning:
        log.warning(warning)
    return AlphaSearch(float(alpha), float(beta1), float(eta), grid, astar, fits, warning)


def assemble_initial(gamma, beta1, eta, alpha) -> ThetaEstimate:
    """β̃ = (β̃₁, η̃ γ̃)."""
    gamma = np.asarray(gamma, dtype=float).ravel()
    return ThetaEstimate(np.concatenate([[beta1], eta * gamma]), alpha)


@dataclass
class InitialFit:
    theta: ThetaEstimate
    gamma: np.ndarray
    search: AlphaSearch


def initial_estimate(data: Dataset, family: FamilySpec, config: MtConfig | None = None) -> InitialFit:
    """Full robust initial estimate θ̃ (MRC + weighted MT + α equation)."""
    config = config or MtConfig()
    data.validate_for(family)
    if data.p == 1:
        gamma = np.zeros(0)
        search = solve_alpha(None, data.y, family, config=config)
    else:
        gamma = mrc_fit(data, config.mrc)
        v = data.xstar @ gamma
        search = solve_alpha(v, data.y, family, config=config)
    theta = assemble_initial(gamma, search.beta1, search.eta, search.alpha)
    return InitialFit(theta, gamma, search)
