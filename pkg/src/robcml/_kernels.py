"""Compiled negative binomial kernels used in the inner loops of the fits."""

import math

import numba
import numpy as np


@numba.njit(cache=True)
def _nb_logpmf_scalar(y, mu, alpha):
    r = 1.0 / alpha
    am = alpha * mu
    return (math.lgamma(y + r) - math.lgamma(r) - math.lgamma(y + 1.0)
            - r * math.log1p(am) + y * (math.log(am) - math.log1p(am)))


@numba.njit(cache=True)
def nb_pmf_cdf(y, mu, alpha):
    """pmf and cdf of NB(mu, alpha) at integer points ``y``.

    The cdf is accumulated term by term with the ratio recurrence
    f(k+1)/f(k) = (k + 1/alpha) / (k + 1) * alpha*mu / (1 + alpha*mu).
    All arrays must have the same length.
    """
    n = y.shape[0]
    pmf = np.empty(n)
    cdf = np.empty(n)
    for i in range(n):
        yi = y[i]
        if yi < 0:
            pmf[i] = 0.0
            cdf[i] = 0.0
            continue
        a = alpha[i]
        m = mu[i]
        r = 1.0 / a
        am = a * m
        q = am / (1.0 + am)
        pmf[i] = math.exp(_nb_logpmf_scalar(yi, m, a))
        lp0 = -r * math.log1p(am)
        k_max = int(yi)
        if lp0 > -700.0:
            term = math.exp(lp0)
            s = term
            for k in range(k_max):
                term *= (k + r) / (k + 1.0) * q
                s += term
        else:
            lt = lp0
            ls = lp0
            lq = math.log(q)
            for k in range(k_max):
                lt += math.log((k + r) / (k + 1.0)) + lq
                hi = max(ls, lt)
                ls = hi + math.log(math.exp(ls - hi) + math.exp(lt - hi))
            s = math.exp(ls)
        cdf[i] = min(s, 1.0)
    return pmf, cdf


@numba.njit(cache=True)
def nb_logpmf(y, mu, alpha):
    n = y.shape[0]
    out = np.empty(n)
    for i in range(n):
        if y[i] < 0:
            out[i] = -np.inf
        else:
            out[i] = _nb_logpmf_scalar(y[i], mu[i], alpha[i])
    return out


@numba.njit(cache=True)
def mcml_terms(y, mu, alpha, a, b):
    """Per-observation contributions to the modified conditional log-likelihood.

    The weight of an observation is the probability, over the jitter u, that
    its randomized quantile residual F(y) - u f(y) lands in [a, b].
    """
    n = y.shape[0]
    pmf, cdf = nb_pmf_cdf(y, mu, alpha)
    out = np.empty(n)
    w_out = np.empty(n)
    lba = math.log(b - a)
    for i in range(n):
        f = pmf[i]
        F = cdf[i]
        if f <= 0.0:
            w = 0.0
        else:
            hi = (F - a) / f
            lo = (F - b) / f
            hi = min(max(hi, 0.0), 1.0)
            lo = min(max(lo, 0.0), 1.0)
            w = hi - lo
        w_out[i] = w
        if w <= 0.0:
            out[i] = 0.0
        elif w >= 1.0:
            out[i] = _nb_logpmf_scalar(y[i], mu[i], alpha[i]) - lba
        else:
            out[i] = w * (_nb_logpmf_scalar(y[i], mu[i], alpha[i]) + math.log(w) - lba)
    return out, w_out


@numba.njit(cache=True)
def nb_clipped_score_moments(mu, alpha, clip, tail):
    """Model sd of the α-score and mean of the score clipped at ``clip`` sd.

    Runs the pmf recursion on 0, 1, 2, ... until the remaining tail mass is
    below ``tail``; digamma differences come from ψ(k+r) − ψ(r) = Σ_{j<k} 1/(r+j).
    """
    n = mu.shape[0]
    r = 1.0 / alpha
    c_out = np.empty(n)
    e_out = np.empty(n)
    for i in range(n):
        am = alpha * mu[i]
        l1 = math.log1p(am)
        lq = math.log(am) - l1
        inv = 1.0 / (alpha * (1.0 + am))
        a2 = alpha * alpha
        # pass 1: first two moments
        lt = -r * l1
        dig = 0.0
        cum = 0.0
        m1 = 0.0
        m2 = 0.0
        k = 0
        while True:
            w = math.exp(lt)
            s = (l1 - dig) / a2 + (k - mu[i]) * inv
            m1 += w * s
            m2 += w * s * s
            cum += w
            if (cum >= 1.0 - tail and k > mu[i]) or k > 10_000_000:
                break
            dig += 1.0 / (r + k)
            lt += math.log((k + r) / (k + 1.0)) + lq
            k += 1
        kmax = k
        sd = math.sqrt(max(m2 / cum - (m1 / cum) ** 2, 1e-300))
        c = clip * sd
        # pass 2: clipped mean
        lt = -r * l1
        dig = 0.0
        e = 0.0
        for k in range(kmax + 1):
            w = math.exp(lt)
            s = (l1 - dig) / a2 + (k - mu[i]) * inv
            e += w * min(max(s, -c), c)
            dig += 1.0 / (r + k)
            lt += math.log((k + r) / (k + 1.0)) + lq
        c_out[i] = c
        e_out[i] = e / cum
    return c_out, e_out


@numba.njit(cache=True)
def conditional_loglik(y, mu, alpha, a, b, omega):
    """Σ ω_i log p(y_i | a <= z_i <= b) for fixed selection weights ``omega``.

    The conditional pmf at the current parameters is f(y) w(y) / (b − a); a
    selected observation (ω_i > 0) with w(y_i) = 0 makes the value −inf.
    """
    n = y.shape[0]
    lba = math.log(b - a)
    total = 0.0
    for i in range(n):
        om = omega[i]
        if om <= 0.0:
            continue
        yi = y[i]
        r = 1.0 / alpha[i]
        am = alpha[i] * mu[i]
        l1 = math.log1p(am)
        lq = math.log(am) - l1
        lf = math.lgamma(yi + r) - math.lgamma(r) - math.lgamma(yi + 1.0) - r * l1 + yi * lq
        f = math.exp(lf)
        lp0 = -r * l1
        k_max = int(yi)
        if lp0 > -700.0:
            q = math.exp(lq)
            term = math.exp(lp0)
            F = term
            for k in range(k_max):
                term *= (k + r) / (k + 1.0) * q
                F += term
        else:
            lt = lp0
            ls = lp0
            for k in range(k_max):
                lt += math.log((k + r) / (k + 1.0)) + lq
                hi = max(ls, lt)
                ls = hi + math.log(math.exp(ls - hi) + math.exp(lt - hi))
            F = math.exp(ls)
        F = min(F, 1.0)
        if f <= 0.0:
            return -np.inf
        hi = min(max((F - a) / f, 0.0), 1.0)
        lo = min(max((F - b) / f, 0.0), 1.0)
        w = hi - lo
        if w <= 0.0:
            return -np.inf
        total += om * (lf + math.log(w) - lba)
    return total


@numba.njit(cache=True)
def strict_inversions(values):
    """Number of pairs i < j with values[i] > values[j] (bottom-up merge sort).

    Applied to v ordered by (y, v) this counts the discordant pairs
    (v_j − v_i)(y_j − y_i) < 0; pairs tied in y or in v never count.
    """
    n = values.shape[0]
    a = values.copy()
    buf = np.empty(n)
    inv = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[i] <= a[j]:
                    buf[k] = a[i]
                    i += 1
                else:
                    buf[k] = a[j]
                    inv += mid - i
                    j += 1
                k += 1
            while i < mid:
                buf[k] = a[i]
                i += 1
                k += 1
            while j < hi:
                buf[k] = a[j]
                j += 1
                k += 1
        a, buf = buf, a
        width *= 2
    return inv
