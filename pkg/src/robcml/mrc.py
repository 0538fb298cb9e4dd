"""Maximum rank correlation estimate of the slope direction.

The objective is the fraction of ordered pairs whose linear-index and
response differences have a nonnegative product (ties are concordant).
It is maximized over the unit sphere: the estimate identifies the slopes
only up to a positive factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateDataError, DomainError
from .model import Dataset


@dataclass(frozen=True)
class GridConfig:
    """Search settings.

    ``method="sweep"`` maximizes exactly over each rotation plane by sorting
    the pair breakpoints; ``method="grid"`` scans ``n_angles`` equally
    spaced angles and refines the best one ``refinements`` times by a factor
    of ten.  The sweep stores all O(n²) pairs, so above ``sweep_max_n``
    observations the grid search is used instead, with concordance counted
    in O(n log n) per direction.  Up to ``polish_max_n`` observations,
    where the objective is rough and pairs are cheap, the ascent also uses
    diagonal rotation planes and is restarted from the ``n_starts`` best
    candidate directions, which include ``n_random`` directions drawn
    uniformly on the sphere by a fixed-seed generator.
    """

    method: str = "sweep"
    n_angles: int = 40
    refinements: int = 3
    max_sweeps: int = 20
    tol: float = 1e-10
    sweep_max_n: int = 1200
    polish_max_n: int = 60
    n_starts: int = 32
    n_random: int = 4000

    def __post_init__(self):
        if self.method not in ("sweep", "grid"):
            raise DomainError(f"unknown MRC method {self.method!r}")


class _Pairs:
    """Pairwise differences over unordered pairs i < j with y_i != y_j."""

    def __init__(self, xstar, y):
        n = y.size
        i, j = np.triu_indices(n, k=1)
        dy = y[j] - y[i]
        keep = dy != 0
        self.n = n
        self.n_tied = int(np.count_nonzero(~keep))
        sign = np.sign(dy[keep])
        self.dx = (xstar[j[keep]] - xstar[i[keep]]) * sign[:, None]

    def concordant(self, gamma):
        """Unordered concordant pairs (ties included) for direction(s) ``gamma``."""
        dv = self.dx @ np.asarray(gamma, dtype=float).T
        return self.n_tied + np.count_nonzero(dv >= 0, axis=0)

    def tau(self, count):
        return 2.0 * count / (self.n * (self.n - 1))


class _RankPairs:
    """Concordance counts without materializing pairs (merge-sort inversions)."""

    def __init__(self, xstar, y):
        self.n = y.size
        self.xstar = xstar
        self.y = y
        self.total = self.n * (self.n - 1) // 2

    def _count(self, g):
        v = self.xstar @ g
        return self.total - int(_kernels.strict_inversions(v[np.lexsort((v, self.y))]))

    def concordant(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        if gamma.ndim == 1:
            return self._count(gamma)
        return np.array([self._count(g) for g in gamma])

    def tau(self, count):
        return 2.0 * count / (self.n * (self.n - 1))


def tau_objective(gamma, data: Dataset) -> float:
    """Fraction of ordered pairs i != j with (γ'x*_j − γ'x*_i)(y_j − y_i) ≥ 0."""
    if data.p < 2 or data.n < 2:
        raise DomainError("tau objective needs p >= 2 and n >= 2")
    gamma = np.asarray(gamma, dtype=float)
    v = data.xstar @ gamma
    y = data.y
    dv = v[None, :] - v[:, None]
    dy = y[None, :] - y[:, None]
    conc = (dv * dy >= 0)
    np.fill_diagonal(conc, False)
    return float(conc.sum()) / (data.n * (data.n - 1))


def _best_rotation_sweep(pairs: _Pairs, g, u):
    """Exact maximizer of the concordance count over cos(t) g + sin(t) u.

    Each pair is concordant on a closed half circle of angles; the count is
    piecewise constant and the midpoint of the best open arc is returned.
    """
    A = pairs.dx @ g
    B = pairs.dx @ u
    R = np.hypot(A, B)
    always = int(np.count_nonzero(R == 0.0))
    A, B = A[R > 0], B[R > 0]
    m = A.size
    if m == 0:
        return 0.0, pairs.n_tied + always
    phi = np.arctan2(B, A)
    start = np.mod(phi - 0.5 * np.pi, 2 * np.pi)
    end = np.mod(phi + 0.5 * np.pi, 2 * np.pi)
    # count just below angle 0, so every event in [0, 2pi) applies in order
    c0 = int(np.count_nonzero((A > 0) | ((A == 0) & (B < 0))))
    ang = np.concatenate([start, end])
    delta = np.concatenate([np.ones(m, dtype=np.int64), -np.ones(m, dtype=np.int64)])
    order = np.argsort(ang, kind="stable")
    ang = ang[order]
    cum = c0 + np.cumsum(delta[order])
    # after event k the count on the open arc (ang[k], ang[k+1]) is cum[k];
    # arc (ang[-1], 2pi + ang[0]) wraps around and has count cum[-1] == c0
    nxt = np.append(ang[1:], ang[0] + 2 * np.pi)
    width = nxt - ang
    valid = width > 1e-12
    if not np.any(valid):
        return 0.0, c0 + pairs.n_tied + always
    best_count = cum[valid].max()
    cand = np.flatnonzero(valid & (cum == best_count))
    # among optimal arcs, prefer the widest, then the one nearest the current direction
    mids = ang[cand] + 0.5 * width[cand]
    dist = np.abs(np.angle(np.exp(1j * mids)))
    key = np.lexsort((dist, -width[cand]))
    theta = float(np.angle(np.exp(1j * mids[key[0]])))
    return theta, int(best_count) + pairs.n_tied + always


def _best_rotation_grid(pairs: _Pairs, g, u, config: GridConfig):
    span = np.pi
    center = 0.0
    best_t, best_c = 0.0, int(pairs.concordant(g))
    k = config.n_angles
    for level in range(config.refinements + 1):
        if level == 0:
            ts = np.linspace(-np.pi, np.pi, 2 * k, endpoint=False)
        else:
            ts = center + np.linspace(-span, span, 2 * k + 1)
        G = np.cos(ts)[:, None] * g[None, :] + np.sin(ts)[:, None] * u[None, :]
        counts = pairs.concordant(G)
        i = int(np.argmax(counts))
        if counts[i] > best_c:
            best_t, best_c = float(ts[i]), int(counts[i])
        center = best_t
        span = (np.pi / k) if level == 0 else span / 10.0
    return best_t, best_c


def _orient(gamma, pairs: _Pairs):
    """Pick the sign with the larger objective; ties go to a positive first nonzero entry."""
    c_pos = int(pairs.concordant(gamma))
    c_neg = int(pairs.concordant(-gamma))
    if c_neg > c_pos:
        return -gamma, c_neg
    if c_neg == c_pos:
        nz = np.flatnonzero(np.abs(gamma) > 1e-12)
        if nz.size and gamma[nz[0]] < 0:
            return -gamma, c_neg
    return gamma, c_pos


def _ascend(pairs, g, best, config: GridConfig, use_sweep, diagonals, total):
    """Rotation-plane ascent from ``g``; returns the final direction and count."""
    d = g.size

    def sweep(g, best, targets):
        for e in targets:
            u = e - np.dot(e, g) * g
            nu = np.linalg.norm(u)
            if nu < 1e-10:
                continue
            u = u / nu
            if use_sweep:
                t, c = _best_rotation_sweep(pairs, g, u)
            else:
                t, c = _best_rotation_grid(pairs, g, u, config)
            if c > best:
                g = np.cos(t) * g + np.sin(t) * u
                g = g / np.linalg.norm(g)
                best = int(pairs.concordant(g))
        return g, best

    for _ in range(config.max_sweeps):
        before = best
        g, best = sweep(g, best, np.eye(d))
        if (best - before) / total < config.tol:
            if not diagonals:
                break
            # stalled on the coordinate planes: try the diagonal planes
            g, best = sweep(g, best, diagonals)
            if (best - before) / total < config.tol:
                break
    return g, best


def mrc_fit(data: Dataset, config: GridConfig | None = None, start=None) -> np.ndarray:
    """Unit vector maximizing :func:`tau_objective`.

    Starts from the best signed coordinate axis (or ``start`` if it is
    better) and cycles through the planes spanned by the current direction
    and each coordinate axis until a pass gains less than ``config.tol`` in
    the objective.  Small samples additionally get diagonal planes and
    restarts (see :class:`GridConfig`); the best end point is returned.
    """
    config = config or GridConfig()
    if data.p < 2:
        raise DomainError("MRC needs at least one slope (p >= 2)")
    y = data.y
    if np.all(y == y[0]):
        raise DegenerateDataError("all responses are tied", stage="mrc")
    xstar = data.xstar
    d = xstar.shape[1]
    use_sweep = config.method == "sweep" and data.n <= config.sweep_max_n
    pairs = _Pairs(xstar, y) if data.n <= config.sweep_max_n else _RankPairs(xstar, y)

    cands = [np.eye(d), -np.eye(d)]
    if start is not None:
        s = np.asarray(start, dtype=float)
        if np.linalg.norm(s) > 0:
            cands.insert(0, (s / np.linalg.norm(s))[None, :])
    small = data.n <= config.polish_max_n and d > 1
    diagonals = []
    if small:
        eye = np.eye(d)
        diagonals = [v / np.sqrt(2.0) for i in range(d) for j in range(i + 1, d)
                     for v in (eye[i] + eye[j], eye[i] - eye[j])]
        cands.append(np.array(diagonals))
        cloud = np.random.default_rng(0).standard_normal((config.n_random, d))
        cands.append(cloud / np.linalg.norm(cloud, axis=1, keepdims=True))
    cands = np.vstack(cands)
    counts = np.asarray(pairs.concordant(cands))
    # stable ranking keeps the caller's start and the axes first among ties
    order = np.argsort(-counts, kind="stable")

    if d == 1:
        g, _ = _orient(cands[order[0]].copy(), pairs)
        return g

    total = data.n * (data.n - 1) / 2.0
    n_starts = config.n_starts if small else 1
    g_best, c_best = None, -1
    for k in order[:n_starts]:
        g, c = _ascend(pairs, cands[k].copy(), int(counts[k]), config, use_sweep,
                       diagonals, total)
        if c > c_best:
            g_best, c_best = g, c
    g, _ = _orient(g_best, pairs)
    return g / np.linalg.norm(g)
