"""Negative binomial and Beta families parametrized by mean and dispersion.

For both families the mean is ``mu`` and the variance grows with ``alpha``:

* NB:   Var = mu + alpha * mu**2
* Beta: Var = mu * (1 - mu) / (1 + 1/alpha), shapes ``mu/alpha`` and ``(1-mu)/alpha``

Densities are evaluated in log space through ``gammaln`` so that counts in
the hundreds do not overflow.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import _kernels
from ._optim import nelder_mead
from .errors import ConvergenceError, DomainError, NumericError
from .model import Dataset, FamilySpec, ThetaEstimate

log = logging.getLogger(__name__)

ALPHA_MIN = 1e-6
_GL_NODES = 256


def _check_nb_params(mu, alpha):
    mu = np.asarray(mu, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(~(mu > 0)) or np.any(~(alpha > 0)):
        raise DomainError("NB requires mu > 0 and alpha > 0")
    return mu, alpha


def _check_counts(y):
    y = np.asarray(y)
    if np.any(y != np.floor(y)):
        raise DomainError("NB responses must be integers")
    return y.astype(float)


# --------------------------------------------------------------------------
# Negative binomial
# --------------------------------------------------------------------------

def nb_logpmf(y, mu, alpha):
    """Log probability mass of NB(mu, alpha); ``-inf`` for negative ``y``."""
    y = _check_counts(y)
    mu, alpha = _check_nb_params(mu, alpha)
    y, mu, alpha = np.broadcast_arrays(y, mu, alpha)
    r = 1.0 / alpha
    am = alpha * mu
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (special.gammaln(y + r) - special.gammaln(r) - special.gammaln(y + 1.0)
               - r * np.log1p(am) + y * (np.log(am) - np.log1p(am)))
    out = np.where(y < 0, -np.inf, out)
    if np.any(np.isnan(out)):
        raise DomainError("non-finite NB log-probability for the given inputs")
    return out if out.ndim else float(out)


def nb_pmf(y, mu, alpha):
    """Γ(y+1/α)/(Γ(1/α)Γ(y+1)) (αμ+1)^(-1/α) (αμ/(αμ+1))^y."""
    return np.exp(nb_logpmf(y, mu, alpha))


def nb_cdf(y, mu, alpha):
    """Cumulative sum of :func:`nb_pmf` from 0 to ``floor(y)``."""
    y = np.floor(np.asarray(y, dtype=float))
    mu, alpha = _check_nb_params(mu, alpha)
    shape = np.broadcast_shapes(y.shape, mu.shape, alpha.shape)
    yb, mb, ab = (np.broadcast_to(v, shape).ravel().astype(float) for v in (y, mu, alpha))
    big = ~np.isfinite(yb)
    yb = np.where(big, 0.0, yb)
    _, cdf = _kernels.nb_pmf_cdf(yb, mb, ab)
    cdf = np.where(big & (np.broadcast_to(y, shape).ravel() > 0), 1.0, cdf)
    cdf = cdf.reshape(shape)
    return cdf if cdf.ndim else float(cdf)


def nb_pmf_cdf(y, mu, alpha):
    """Vectorized ``(pmf, cdf)`` at integer ``y`` (no validation, fast path)."""
    y, mu, alpha = np.broadcast_arrays(np.asarray(y, float), np.asarray(mu, float),
                                       np.asarray(alpha, float))
    shape = y.shape
    pmf, cdf = _kernels.nb_pmf_cdf(y.ravel().copy(), mu.ravel().copy(), alpha.ravel().copy())
    return pmf.reshape(shape), cdf.reshape(shape)


@functools.lru_cache(maxsize=4096)
def _nb_cumulative(mu, alpha, upto):
    k = np.arange(upto + 1, dtype=float)
    return np.minimum(np.cumsum(nb_pmf(k, mu, alpha)), 1.0)


def nb_quantile(c, mu, alpha):
    """Largest integer ``y`` with ``F(y) <= c``, or -1 when ``F(0) > c``.

    This is not the usual left-continuous inverse of the cdf.  The search
    doubles an upper bound until the cdf exceeds ``c`` and then bisects the
    cached running sums for ``(mu, alpha)``.
    """
    c = float(c)
    if not 0.0 <= c < 1.0:
        raise DomainError(f"quantile level must lie in [0, 1), got {c}")
    mu, alpha = (float(v) for v in _check_nb_params(mu, alpha))
    upto = max(16, int(mu))
    while True:
        cum = _nb_cumulative(mu, alpha, upto)
        if cum[-1] > c:
            break
        if upto > 1 << 40:
            raise NumericError(f"cdf never exceeds {c} for mu={mu}, alpha={alpha}")
        upto *= 2
    # cum is nondecreasing; first index with cum > c is y*(c) + 1
    return int(np.searchsorted(cum, c, side="right")) - 1


def nb_quantile_array(c, mu, alpha):
    """Vectorized :func:`nb_quantile` for arrays of means (same convention)."""
    from scipy.stats import nbinom

    c, mu, alpha = np.broadcast_arrays(np.asarray(c, float), np.asarray(mu, float),
                                       np.asarray(alpha, float))
    r = 1.0 / alpha
    p = 1.0 / (1.0 + alpha * mu)
    k = np.asarray(nbinom.ppf(c, r, p), dtype=float)
    k = np.where(np.isfinite(k), k, 0.0)
    # ppf returns the smallest k with F(k) >= c; step down until F(k) <= c < F(k+1)
    for _ in range(3):
        _, Fk = nb_pmf_cdf(k, mu, alpha)
        k = np.where((Fk > c) & (k >= 0), k - 1, k)
        _, Fk1 = nb_pmf_cdf(k + 1, mu, alpha)
        k = np.where(Fk1 <= c, k + 1, k)
    return k.astype(np.int64)


def nb_score_alpha(y, mu, alpha):
    """Derivative of the NB log-likelihood with respect to ``alpha``."""
    y = np.asarray(y, dtype=float)
    r = 1.0 / alpha
    am = alpha * mu
    return ((np.log1p(am) - special.digamma(y + r) + special.digamma(r)) / alpha**2
            + (y - mu) / (alpha * (1.0 + am)))


def nb_sample(mu, alpha, rng, size=None):
    """Gamma-Poisson mixture draws from NB(mu, alpha)."""
    mu, alpha = _check_nb_params(mu, alpha)
    shape = size if size is not None else np.broadcast_shapes(mu.shape, alpha.shape)
    lam = rng.gamma(1.0 / alpha, alpha * mu, size=shape)
    return rng.poisson(lam).astype(float)


# --------------------------------------------------------------------------
# Beta
# --------------------------------------------------------------------------

def _check_beta(y, mu, alpha):
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(~((y > 0) & (y < 1))):
        raise DomainError("Beta responses must lie in (0, 1)")
    if np.any(~((mu > 0) & (mu < 1))) or np.any(~(alpha > 0)):
        raise DomainError("Beta requires 0 < mu < 1 and alpha > 0")
    return y, mu, alpha


def beta_logpdf(y, mu, alpha):
    y, mu, alpha = _check_beta(y, mu, alpha)
    a = mu / alpha
    b = (1.0 - mu) / alpha
    out = ((a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y) - special.betaln(a, b))
    return out if np.ndim(out) else float(out)


def beta_pdf(y, mu, alpha):
    """Beta density with shapes ``mu/alpha`` and ``(1-mu)/alpha``."""
    return np.exp(beta_logpdf(y, mu, alpha))


def beta_cdf(y, mu, alpha):
    y, mu, alpha = _check_beta(y, mu, alpha)
    out = special.betainc(mu / alpha, (1.0 - mu) / alpha, y)
    return out if np.ndim(out) else float(out)


def beta_quantile(c, mu, alpha):
    """Inverse of :func:`beta_cdf`, polished by bisection when needed."""
    c = np.asarray(c, dtype=float)
    if np.any(~((c > 0) & (c < 1))):
        raise DomainError("Beta quantile level must lie in (0, 1)")
    mu = np.asarray(mu, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(~((mu > 0) & (mu < 1))) or np.any(~(alpha > 0)):
        raise DomainError("Beta requires 0 < mu < 1 and alpha > 0")
    a = mu / alpha
    b = (1.0 - mu) / alpha
    q = np.asarray(special.betaincinv(a, b, c), dtype=float)
    scalar = q.ndim == 0
    a, b, c, q = (np.atleast_1d(v) for v in np.broadcast_arrays(a, b, c, q))
    bad = ~np.isfinite(q) | (np.abs(special.betainc(a, b, q) - c) > 1e-12)
    if np.any(bad):
        q = q.copy()
        for idx in zip(*np.nonzero(bad)):
            q[idx] = _beta_bisect(a[idx], b[idx], c[idx])
    return float(q[0]) if scalar else q


def _beta_bisect(a, b, c):
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if special.betainc(a, b, mid) < c:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            return 0.5 * (lo + hi)
    raise NumericError(f"Beta quantile inversion did not converge (a={a}, b={b}, c={c})")


def beta_score_alpha(y, mu, alpha):
    """Derivative of the Beta log-density with respect to ``alpha``."""
    y = np.asarray(y, dtype=float)
    a = mu / alpha
    b = (1.0 - mu) / alpha
    d_ab = special.digamma(a + b)
    da = special.digamma(a)
    db = special.digamma(b)
    # d a/d alpha = -a/alpha, d b/d alpha = -b/alpha
    return (-(a / alpha) * (np.log(y) - da + d_ab)
            - (b / alpha) * (np.log1p(-y) - db + d_ab))


def beta_sample(mu, alpha, rng, size=None):
    """Beta draws via two independent Gamma variates."""
    mu = np.asarray(mu, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    shape = size if size is not None else np.broadcast_shapes(mu.shape, alpha.shape)
    g1 = rng.gamma(mu / alpha, size=shape)
    g2 = rng.gamma((1.0 - mu) / alpha, size=shape)
    return g1 / (g1 + g2)


# --------------------------------------------------------------------------
# Family dispatch
# --------------------------------------------------------------------------

def variance(family: FamilySpec, mu, alpha):
    mu = np.asarray(mu, dtype=float)
    if family.discrete:
        return mu + alpha * mu**2
    return mu * (1.0 - mu) / (1.0 + 1.0 / alpha)


def logpdf(family: FamilySpec, y, mu, alpha):
    if family.discrete:
        return nb_logpmf(y, mu, alpha)
    return beta_logpdf(y, mu, alpha)


def pdf(family: FamilySpec, y, mu, alpha):
    return np.exp(logpdf(family, y, mu, alpha))


def cdf(family: FamilySpec, y, mu, alpha):
    if family.discrete:
        return nb_cdf(y, mu, alpha)
    return beta_cdf(y, mu, alpha)


def sample(family: FamilySpec, mu, alpha, rng, size=None):
    if family.discrete:
        return nb_sample(mu, alpha, rng, size)
    return beta_sample(mu, alpha, rng, size)


def score_alpha(family: FamilySpec, y, mu, alpha):
    if family.discrete:
        return nb_score_alpha(y, mu, alpha)
    return beta_score_alpha(y, mu, alpha)


@functools.lru_cache(maxsize=1)
def _gauss_legendre_unit():
    x, w = np.polynomial.legendre.leggauss(_GL_NODES)
    return 0.5 * (x + 1.0), 0.5 * w


def support_grid(family: FamilySpec, mu, alpha, tail=1e-10):
    """Points and weights for model expectations at each mean in ``mu``.

    NB: exact summation over ``0..K`` where K covers the ``1 - tail``
    quantile of the largest mean (rows are padded with zero weight).
    Beta: Gauss-Legendre rule on the probability scale, i.e. nodes
    ``F^-1(u_k)`` with weights ``w_k``.

    Returns ``(points, weights)`` of shape ``(len(mu), K)``.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if family.discrete:
        from scipy.stats import nbinom

        r = 1.0 / alpha
        top = nbinom.ppf(1.0 - tail, r, 1.0 / (1.0 + alpha * mu.max()))
        k = np.arange(int(top) + 2, dtype=float)
        pts = np.broadcast_to(k, (mu.size, k.size))
        am = alpha * mu[:, None]
        logp = (special.gammaln(k + r) - special.gammaln(r) - special.gammaln(k + 1.0)
                - r * np.log1p(am) + k * (np.log(am) - np.log1p(am)))
        return pts, np.exp(logp)
    u, w = _gauss_legendre_unit()
    pts = beta_quantile(u[None, :], mu[:, None], alpha)
    return pts, np.broadcast_to(w, pts.shape)


# --------------------------------------------------------------------------
# Maximum likelihood
# --------------------------------------------------------------------------

@dataclass
class MLFit:
    theta: ThetaEstimate
    loglik: float
    converged: bool
    nfev: int


def loglik(theta: ThetaEstimate, data: Dataset, family: FamilySpec) -> float:
    """Σ ln f_{h(x'β), α}(y)."""
    return float(np.sum(_loglik_terms(theta.to_vector(), data, family)))


def _loglik_terms(x, data, family):
    beta = x[:-1]
    alpha = max(x[-1] ** 2, ALPHA_MIN)
    mu = family.mean(data.X @ beta)
    if family.discrete:
        a = np.full(mu.shape, alpha)
        return _kernels.nb_logpmf(data.y, mu, a)
    mu = np.clip(mu, 1e-12, 1 - 1e-12)
    a = mu / alpha
    b = (1.0 - mu) / alpha
    return ((a - 1.0) * np.log(data.y) + (b - 1.0) * np.log1p(-data.y) - special.betaln(a, b))


def default_start(data: Dataset, family: FamilySpec) -> ThetaEstimate:
    """Moment-based starting point: least squares on the link scale."""
    y = data.y
    if family.discrete:
        z = np.log(y + 0.5)
    else:
        z = np.log(y) - np.log1p(-y)
    beta, *_ = np.linalg.lstsq(data.X, z, rcond=None)
    mu = family.mean(data.X @ beta)
    if family.discrete:
        resid2 = (y - mu) ** 2 - mu
        alpha = max(np.sum(resid2 * mu**2) / max(np.sum(mu**4), 1e-12), 0.05)
    else:
        ratio = np.mean((y - mu) ** 2 / (mu * (1 - mu)))
        ratio = min(max(ratio, 1e-3), 0.9)
        alpha = 1.0 / (1.0 / ratio - 1.0)
    return ThetaEstimate(beta, alpha)


def ml_fit(data: Dataset, family: FamilySpec, init: ThetaEstimate | None = None,
           xatol=1e-8) -> MLFit:
    """Maximum likelihood by Nelder-Mead in ``(beta, sigma = sqrt(alpha))``.

    The result never has a lower log-likelihood than ``init``.  When the
    optimizer ends on a non-finite objective a :class:`ConvergenceError`
    carrying the best parameters seen is raised.
    """
    data.validate_for(family)
    start = init if init is not None else default_start(data, family)
    if data.p == 1 and init is None and family.discrete:
        # intercept-only NB: the MLE of mu is the sample mean
        start = ThetaEstimate([np.log(max(data.y.mean(), 1e-8))], start.alpha)

    def negll(x):
        return -float(np.sum(_loglik_terms(x, data, family)))

    x0 = start.to_vector()
    f0 = negll(x0)
    res = nelder_mead(negll, x0, step=0.1, xatol=xatol)
    if not np.isfinite(res.fun):
        raise ConvergenceError("ML optimizer produced a non-finite likelihood",
                               best=start, stage="ml_fit")
    x = res.x
    if res.fun > f0:
        x, res.fun = x0, f0
    x[-1] = abs(x[-1])
    theta = ThetaEstimate.from_vector(x)
    theta.alpha = max(theta.alpha, ALPHA_MIN)
    return MLFit(theta, -res.fun, res.converged, res.nfev)
