"""Conditional maximum likelihood given that the quantile residual is kept.

For discrete families the boundary indicators of the conditional likelihood
are replaced by their expectations over the jitter (the "modified" CML).
With cutoffs (a, b) the conditional pmf of y given a <= z <= b is

    p(y) = f(y) w(y) / (b - a),  w(y) = clip((F(y) - a)/f(y), 0, 1) - clip((F(y) - b)/f(y), 0, 1),

where w(y) is the probability over u that F(y) - u f(y) falls in [a, b].
w is 1 on T_a <= y <= T_b, t_a at y = T_a - 1, 1 - t_b at y = T_b + 1 and 0
elsewhere, and the normalizer Q sums to exactly b - a.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from . import family as fam
from ._optim import nelder_mead
from .errors import DomainError, OverTruncationError, RobCMLError
from .initial import MtConfig, initial_estimate
from .model import NB, Dataset, FamilySpec, ThetaEstimate
from .rqr import CutoffWarning, RqrDiagnostics, adaptive_cutoffs, rqr_compute

log = logging.getLogger(__name__)

BETA_LIMIT = 50.0
SIGMA_LIMIT = 20.0


# --------------------------------------------------------------------------
# conditional support
# --------------------------------------------------------------------------

@dataclass
class ConditionalSupport:
    """Per-observation truncation quantities; ``inf`` marks an open upper end (b = 1)."""

    y_star_a: np.ndarray
    y_star_b: np.ndarray
    T_a: np.ndarray
    T_b: np.ndarray
    t_a: np.ndarray
    t_b: np.ndarray
    Q: np.ndarray

    def weight(self, y):
        """Expected inclusion weight of count ``y`` (vectorized over rows)."""
        y = np.asarray(y, dtype=float)
        w = ((y >= self.T_a) & (y <= self.T_b)).astype(float)
        w = np.where(y == self.T_a - 1, self.t_a, w)
        w = np.where(y == self.T_b + 1, 1.0 - self.t_b, w)
        # both boundaries on one count: only jitters in [t_b, t_a] are kept
        both = (self.T_a - 1 == self.T_b + 1) & (y == self.T_a - 1)
        return np.where(both, np.maximum(self.t_a - self.t_b, 0.0), w)


def _check_cutoffs(a, b):
    if not (0.0 <= a < b <= 1.0):
        raise DomainError(f"need 0 <= a < b <= 1, got ({a}, {b})")


def discrete_support(a, b, mu, alpha) -> ConditionalSupport:
    """T_a, T_b, t_a, t_b and Q for NB(mu, alpha) truncated to a <= z <= b."""
    _check_cutoffs(a, b)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    alpha = float(alpha)

    def star(c):
        if c >= 1.0:
            return np.full(mu.shape, np.inf)
        return np.array([fam.nb_quantile(c, m, alpha) for m in mu], dtype=float)

    ya, yb = star(a), star(b)
    T_a = ya + 2
    T_b = yb

    def frac(c, ys):
        t = np.ones(mu.shape)
        fin = np.isfinite(ys)
        if np.any(fin):
            k = ys[fin] + 1
            f, F = fam.nb_pmf_cdf(k, mu[fin], np.full(k.shape, alpha))
            t[fin] = np.clip((F - c) / f, 0.0, 1.0)
        return t

    t_a = frac(a, ya)
    t_b = frac(b, yb)
    if np.any(T_b + 1 < T_a - 1):
        raise OverTruncationError("conditional support is empty", stage="cml")
    Q = _support_mass(T_a, T_b, t_a, t_b, mu, alpha)
    if np.any(Q <= 0):
        raise OverTruncationError("conditional support has no mass", stage="cml")
    return ConditionalSupport(ya, yb, T_a, T_b, t_a, t_b, Q)


def _support_mass(T_a, T_b, t_a, t_b, mu, alpha):
    """Q = F(T_b) − F(T_a − 1) + f(T_a − 1) t_a + f(T_b + 1)(1 − t_b)."""
    al = np.full(mu.shape, alpha)
    f_lo, F_lo = fam.nb_pmf_cdf(T_a - 1, mu, al)
    Q = f_lo * t_a - F_lo
    fin = np.isfinite(T_b)
    F_hi = np.ones(mu.shape)
    f_up = np.zeros(mu.shape)
    if np.any(fin):
        _, F_hi[fin] = fam.nb_pmf_cdf(T_b[fin], mu[fin], al[fin])
        f_up[fin], _ = fam.nb_pmf_cdf(T_b[fin] + 1, mu[fin], al[fin])
    return Q + F_hi + f_up * (1.0 - t_b)


# --------------------------------------------------------------------------
# objectives
# --------------------------------------------------------------------------

def conditional_logdensity(y, x, theta: ThetaEstimate, a, b, family: FamilySpec) -> float:
    """log of the conditional density of ``y`` at covariate row ``x`` given a <= z <= b."""
    _check_cutoffs(a, b)
    mu = float(theta.mu(np.atleast_2d(x), family)[0])
    if family.discrete:
        sup = discrete_support(a, b, mu, theta.alpha)
        w = float(sup.weight(np.array([y]))[0])
        if w <= 0:
            return -math.inf
        return float(fam.nb_logpmf(y, mu, theta.alpha)) + math.log(w) - math.log(sup.Q[0])
    lo = fam.beta_quantile(a, mu, theta.alpha) if a > 0 else 0.0
    hi = fam.beta_quantile(b, mu, theta.alpha) if b < 1 else 1.0
    if not lo <= y <= hi:
        return -math.inf
    return float(fam.beta_logpdf(y, mu, theta.alpha)) - math.log(b - a)


def inclusion_weights(theta: ThetaEstimate, data: Dataset, a, b, family: FamilySpec):
    """Expected probability over the jitter that each residual lands in [a, b].

    For continuous families this is the 0/1 indicator a <= F(y) <= b.
    """
    _check_cutoffs(a, b)
    mu = theta.mu(data.X, family)
    if family.discrete:
        alpha = np.full(data.n, max(theta.alpha, fam.ALPHA_MIN))
        _, w = _kernels.mcml_terms(data.y, mu, alpha, float(a), float(b))
        return w
    F = fam.beta_cdf(data.y, np.clip(mu, 1e-12, 1 - 1e-12), theta.alpha)
    return ((F >= a) & (F <= b)).astype(float)


def mcml_objective(theta: ThetaEstimate, data: Dataset, a, b, family: FamilySpec,
                   weights=None) -> float:
    """Modified conditional log-likelihood for counts.

    Each observation contributes ω_i log p(y_i | a <= z <= b), where the
    conditional pmf is evaluated at ``theta`` and ω_i are the selection
    weights: the expected inclusion probabilities at the estimate that
    produced the residuals.  ``weights=None`` takes them at ``theta`` itself.
    """
    if not family.discrete:
        raise DomainError("the modified objective is defined for discrete families")
    _check_cutoffs(a, b)
    if weights is None:
        weights = inclusion_weights(theta, data, a, b, family)
    mu = theta.mu(data.X, family)
    alpha = np.full(data.n, max(theta.alpha, fam.ALPHA_MIN))
    return float(_kernels.conditional_loglik(data.y, mu, alpha, float(a), float(b),
                                             np.asarray(weights, dtype=float)))


def cml_exact_objective(theta: ThetaEstimate, data: Dataset, a, b, z) -> float:
    """Exact-indicator conditional log-likelihood for counts.

    Rows with residual ``z`` in [a, b] are kept; each contributes the log of
    the conditional pmf f(y) W(y) at ``theta``, built from the T/t/Q
    quantities of :func:`discrete_support`.
    """
    _check_cutoffs(a, b)
    keep = (np.asarray(z) >= a) & (np.asarray(z) <= b)
    if not np.any(keep):
        return 0.0
    mu = theta.mu(data.X[keep], NB)
    y = data.y[keep]
    sup = discrete_support(a, b, mu, theta.alpha)
    w = sup.weight(y)
    if np.any(w <= 0):
        return -math.inf
    return float(np.sum(fam.nb_logpmf(y, mu, theta.alpha) + np.log(w) - np.log(sup.Q)))


def continuous_cml_objective(theta: ThetaEstimate, data: Dataset, a, b, selected) -> float:
    """Conditional log-likelihood for Beta responses over the kept rows ``selected``.

    Kept rows contribute log f(y) − log(b − a) and must satisfy
    a <= F(y) <= b at ``theta``; otherwise the value is −inf.
    """
    from .model import BETA

    sel = np.asarray(selected, dtype=bool)
    if not np.any(sel):
        return 0.0
    mu = np.clip(theta.mu(data.X[sel], BETA), 1e-12, 1 - 1e-12)
    y = data.y[sel]
    F = fam.beta_cdf(y, mu, theta.alpha)
    if np.any(F < a) or np.any(F > b):
        return -math.inf
    return float(np.sum(fam.beta_logpdf(y, mu, theta.alpha)) - sel.sum() * math.log(b - a))


def _objective_factory(data, family, a, b, weights):
    """Objective in optimizer coordinates (β, σ) with selection ``weights`` held fixed."""
    if weights is None:
        weights = np.ones(data.n)
    weights = np.asarray(weights, dtype=float)
    if family.discrete:
        X, y = data.X, data.y
        a, b = float(a), float(b)

        def obj(x):
            alpha = max(x[-1] ** 2, fam.ALPHA_MIN)
            mu = family.mean(X @ x[:-1])
            return float(_kernels.conditional_loglik(y, mu, np.full(y.size, alpha), a, b, weights))
        return obj

    selected = weights > 0

    def obj(x):
        theta = ThetaEstimate(x[:-1], max(x[-1] ** 2, fam.ALPHA_MIN))
        return continuous_cml_objective(theta, data, a, b, selected)
    return obj


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------

@dataclass
class CmlFit:
    theta: ThetaEstimate
    objective: float
    diverged: bool
    nfev: int
    reason: str = ""


def cml_fit(data: Dataset, family: FamilySpec, theta_init: ThetaEstimate,
            diagnostics: RqrDiagnostics, xatol=1e-8, fatol=1e-12, step=0.1) -> CmlFit:
    """Maximize the conditional likelihood from ``theta_init``.

    ``diagnostics`` must hold residuals computed at ``theta_init`` together
    with their cutoffs; the selection weights are fixed there (expected
    inclusion probabilities for counts, the residual indicator for Beta
    responses) while the conditional density moves with the parameters.  A run that ends
    below the starting objective or beyond |β_j| > 50 or σ > 20 is reported
    as diverged and returns ``theta_init``.
    """
    a, b = diagnostics.a_tilde, diagnostics.b_tilde
    if a is None or b is None:
        raise DomainError("cutoffs must be computed before the CML fit", stage="cml")
    _check_cutoffs(a, b)
    if family.discrete:
        weights = inclusion_weights(theta_init, data, a, b, family)
    else:
        weights = ((diagnostics.z >= a) & (diagnostics.z <= b)).astype(float)
    obj = _objective_factory(data, family, a, b, weights)
    x0 = theta_init.to_vector()
    f0 = obj(x0)
    if not np.isfinite(f0):
        return CmlFit(theta_init, f0, True, 1, "objective is not finite at the start")
    res = nelder_mead(lambda x: -obj(x), x0, step=step, xatol=xatol, fatol=fatol)
    x = res.x.copy()
    x[-1] = abs(x[-1])
    val = -res.fun
    reason = ""
    if not np.isfinite(val) or val < f0 - 1e-6:
        reason = "objective decreased"
    elif np.any(np.abs(x[:-1]) > BETA_LIMIT) or x[-1] > SIGMA_LIMIT:
        reason = "parameters left the admissible box"
    if reason:
        log.warning("CML fit diverged: %s", reason)
        return CmlFit(theta_init, f0, True, res.nfev, reason)
    theta = ThetaEstimate.from_vector(x)
    theta.alpha = max(theta.alpha, fam.ALPHA_MIN)
    return CmlFit(theta, val, False, res.nfev)


# --------------------------------------------------------------------------
# standard errors
# --------------------------------------------------------------------------

def numerical_hessian(fun, x, rel_step=1e-4):
    """Central-difference Hessian with step ``rel_step * (1 + |x_j|)``."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = rel_step * (1.0 + np.abs(x))
    H = np.empty((d, d))
    f0 = fun(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (fun(x + ei + ej) - fun(x + ei - ej)
                                 - fun(x - ei + ej) + fun(x - ei - ej)) / (4 * h[i] * h[j])
    return H


def standard_errors_from_objective(fun, x):
    """SEs of ``x`` from the inverse Hessian of the negative objective ``fun``.

    Returns ``None`` when the Hessian is not positive definite.
    """
    H = numerical_hessian(fun, x)
    if not np.all(np.isfinite(H)):
        return None
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return None
    Linv = np.linalg.inv(L)
    cov = Linv.T @ Linv
    return np.sqrt(np.diag(cov))


def standard_errors(theta_hat: ThetaEstimate, data: Dataset, family: FamilySpec, a, b,
                    weights=None):
    """Wald SEs for (β, α) at ``theta_hat`` under cutoffs (a, b), or ``None``.

    Selection weights default to the inclusion weights at ``theta_hat``.
    The Hessian is taken in (β, σ = √α); SE(α) = 2σ·SE(σ).
    """
    if weights is None:
        weights = inclusion_weights(theta_hat, data, a, b, family)
    obj = _objective_factory(data, family, a, b, weights)
    x = theta_hat.to_vector()
    se = standard_errors_from_objective(lambda v: -obj(v), x)
    if se is None:
        log.warning("Hessian is not positive definite; standard errors unavailable")
        return None
    se = se.copy()
    se[-1] = 2.0 * x[-1] * se[-1]
    return se


# --------------------------------------------------------------------------
# full pipeline
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    zeta1: float = 0.05
    zeta2: float = 0.95
    replicates: int = 30
    iterations: int = 2
    seed: int = 0
    compute_se: bool = True
    xatol: float = 1e-8
    fatol: float = 1e-12
    mt: MtConfig = field(default_factory=MtConfig)

    def __post_init__(self):
        if self.replicates < 1 or self.iterations < 1:
            raise DomainError("replicates and iterations must be positive")
        if not (0.0 <= self.zeta1 < self.zeta2 <= 1.0):
            raise DomainError("need 0 <= zeta1 < zeta2 <= 1")


@dataclass
class ReplicateTrace:
    index: int
    cutoffs: list
    thetas: list
    diverged: bool


@dataclass
class FitReport:
    family: str
    names: list
    initial: dict
    estimate: dict
    standard_errors: list | None
    mean_cutoffs: tuple
    replicates: list
    rejected: list
    boundary_lower: list
    boundary_upper: list
    support: dict
    diverged: bool
    seed: int
    config: dict

    @property
    def theta(self) -> ThetaEstimate:
        return ThetaEstimate(self.estimate["beta"], self.estimate["alpha"])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        d = json.loads(text)
        d["mean_cutoffs"] = tuple(d["mean_cutoffs"])
        return cls(**d)


def rejection_lists(theta: ThetaEstimate, data: Dataset, family: FamilySpec, a, b):
    """Fully rejected rows and rows on the lower/upper boundary under cutoffs (a, b)."""
    mu = theta.mu(data.X, family)
    if family.discrete:
        sup = discrete_support(a, b, mu, theta.alpha)
        w = sup.weight(data.y)
        lower = np.flatnonzero((data.y == sup.T_a - 1) & (w > 0))
        upper = np.flatnonzero((data.y == sup.T_b + 1) & (w > 0) & (data.y != sup.T_a - 1))
        return np.flatnonzero(w <= 0), lower, upper, sup
    F = fam.beta_cdf(data.y, np.clip(mu, 1e-12, 1 - 1e-12), theta.alpha)
    empty = np.array([], dtype=int)
    return np.flatnonzero((F < a) | (F > b)), empty, empty, None


def _support_summary(sup: ConditionalSupport | None):
    if sup is None:
        return {}
    # intercept-only fits share one support across rows
    def first(v):
        return float(v[0]) if np.isfinite(v[0]) else None
    return {"T_a": first(sup.T_a), "T_b": first(sup.T_b),
            "t_a": first(sup.t_a), "t_b": first(sup.t_b)}


def run_replicate(data, family, theta0, config: PipelineConfig, rng, index=0):
    """Iterated residuals, cutoffs and CML fit for one jitter draw."""
    theta = theta0
    u = rng.uniform(size=data.n) if family.discrete else None
    cutoffs, thetas, diverged = [], [], False
    for _ in range(config.iterations):
        diag = rqr_compute(theta, data, family, u=u)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CutoffWarning)
            diag = diag.with_cutoffs(config.zeta1, config.zeta2)
        fit = cml_fit(data, family, theta, diag, xatol=config.xatol, fatol=config.fatol)
        diverged |= fit.diverged
        theta = fit.theta
        cutoffs.append([diag.a_tilde, diag.b_tilde])
        thetas.append(theta.as_dict())
    return theta, ReplicateTrace(index, cutoffs, thetas, diverged)


def cml_pipeline(data: Dataset, family: FamilySpec, config: PipelineConfig | None = None,
                 theta_init: ThetaEstimate | None = None) -> FitReport:
    """Robust initial estimate followed by replicate-averaged conditional ML.

    Each replicate draws its own jitters from a stream spawned from
    ``config.seed`` and runs ``config.iterations`` rounds of residuals,
    cutoffs and CML starting from the initial estimate.  The reported
    estimate is the component-wise mean over replicates.
    """
    config = config or PipelineConfig()
    data.validate_for(family)
    if theta_init is None:
        try:
            theta_init = initial_estimate(data, family, config.mt).theta
        except RobCMLError as err:
            if err.stage is None:
                err.stage = "init"
            raise
    n_rep = config.replicates if family.discrete else 1
    streams = np.random.SeedSequence(config.seed).spawn(n_rep)
    betas, alphas, traces = [], [], []
    for r, ss in enumerate(streams):
        theta, trace = run_replicate(data, family, theta_init, config,
                                     np.random.default_rng(ss), r)
        betas.append(theta.beta)
        alphas.append(theta.alpha)
        traces.append(trace)
    beta = np.array([math.fsum(col) / n_rep for col in np.array(betas).T])
    alpha = math.fsum(alphas) / n_rep
    theta_hat = ThetaEstimate(beta, alpha)
    final_cuts = np.array([t.cutoffs[-1] for t in traces])
    a_bar = float(final_cuts[:, 0].mean())
    b_bar = float(final_cuts[:, 1].mean())
    rejected, lower, upper, sup = rejection_lists(theta_hat, data, family, a_bar, b_bar)
    se = None
    if config.compute_se:
        se_arr = standard_errors(theta_hat, data, family, a_bar, b_bar)
        se = None if se_arr is None else se_arr.tolist()
    return FitReport(
        family=family.kind.value,
        names=list(data.names),
        initial=theta_init.as_dict(),
        estimate=theta_hat.as_dict(),
        standard_errors=se,
        mean_cutoffs=(a_bar, b_bar),
        replicates=[asdict(t) for t in traces],
        rejected=rejected.tolist(),
        boundary_lower=lower.tolist(),
        boundary_upper=upper.tolist(),
        support=_support_summary(sup) if data.p == 1 else {},
        diverged=any(t.diverged for t in traces),
        seed=config.seed,
        config={"zeta1": config.zeta1, "zeta2": config.zeta2,
                "replicates": n_rep, "iterations": config.iterations},
    )
