"""Monte Carlo harness: clean-model efficiency and point-contamination robustness."""

from __future__ import annotations

import csv
import io
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import family as fam
from .cml import PipelineConfig, cml_pipeline
from .errors import ConfigError, RobCMLError
from .initial import MtConfig, initial_estimate
from .model import NB, Dataset, ThetaEstimate

log = logging.getLogger(__name__)

ESTIMATORS = ("ML", "INI", "CML")


@dataclass(frozen=True)
class Contamination:
    fraction: float = 0.1
    x_out: tuple = (3.0, 1.0, 0.0, 0.0, 0.0)
    y_out: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.fraction < 0.5:
            raise ConfigError(f"contamination fraction must lie in [0, 0.5), got {self.fraction}")


@dataclass(frozen=True)
class SimConfig:
    n: int = 400
    reps: int = 200
    beta0: tuple = (1.5, 0.5, 0.25, 0.0, 0.0, 0.0)
    alpha0: float = 0.8
    contamination: Contamination | None = None
    estimators: tuple = ESTIMATORS
    seed: int = 0
    cml_replicates: int = 3
    cml_xatol: float = 1e-5
    cml_fatol: float = 1e-7
    zeta1: float = 0.05
    zeta2: float = 0.95
    mt: MtConfig = field(default_factory=MtConfig)

    def __post_init__(self):
        if self.n < len(self.beta0) or self.reps < 1:
            raise ConfigError("need n >= p and reps >= 1")
        if self.alpha0 <= 0:
            raise ConfigError("alpha0 must be positive")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ConfigError(f"unknown estimators {sorted(unknown)}")
        if self.contamination is not None and len(self.contamination.x_out) != len(self.beta0) - 1:
            raise ConfigError("x_out must have one entry per slope")


def _rep_rng(config: SimConfig, rep_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(config.seed, spawn_key=(rep_index,))
    return np.random.default_rng(ss)


def gen_sample(config: SimConfig, rep_index: int, return_rng=False):
    """Replication ``rep_index``: x* ~ N(0, I), y ~ NB(exp(x'β₀), α₀), then contamination.

    The generator is derived from (seed, rep_index) alone, so any replication
    can be regenerated in isolation.  With ``return_rng`` the generator is
    returned as well, positioned after the data draws.
    """
    rng = _rep_rng(config, rep_index)
    p = len(config.beta0)
    xstar = rng.standard_normal((config.n, p - 1))
    X = np.column_stack([np.ones(config.n), xstar])
    mu = np.exp(X @ np.asarray(config.beta0))
    y = fam.nb_sample(mu, config.alpha0, rng)
    data = Dataset(y, X, outlier_mask=np.zeros(config.n, dtype=bool))
    c = config.contamination
    if c is not None and c.fraction > 0:
        data = contaminate(data, c.fraction, c.x_out, c.y_out)
    return (data, rng) if return_rng else data


def contaminate(data: Dataset, fraction, x_out, y_out) -> Dataset:
    """Replace the last ⌊fraction·n⌋ rows by the point (x_out, y_out) and mark them."""
    if not 0.0 <= fraction < 0.5:
        raise ConfigError(f"contamination fraction must lie in [0, 0.5), got {fraction}")
    k = int(np.floor(fraction * data.n))
    mask = (np.zeros(data.n, dtype=bool) if data.outlier_mask is None
            else data.outlier_mask.copy())
    if k == 0:
        return Dataset(data.y.copy(), data.X.copy(), list(data.names), mask)
    x_out = np.asarray(x_out, dtype=float)
    if x_out.size != data.p - 1:
        raise ConfigError("x_out must have one entry per slope")
    X = data.X.copy()
    y = data.y.copy()
    X[-k:, 1:] = x_out
    y[-k:] = y_out
    mask[-k:] = True
    return Dataset(y, X, list(data.names), mask)


@dataclass
class RepOutcome:
    rep: int
    estimates: dict
    mape: dict
    seconds: float
    errors: dict = field(default_factory=dict)


def _mape_rows(theta: ThetaEstimate, data: Dataset, beta0):
    keep = ~data.outlier_mask if data.outlier_mask is not None else np.ones(data.n, bool)
    mu_hat = np.exp(data.X[keep] @ theta.beta)
    mu0 = np.exp(data.X[keep] @ np.asarray(beta0))
    return float(np.mean(np.abs(mu_hat - mu0)))


def run_replication(config: SimConfig, rep_index: int) -> RepOutcome:
    """Fit the requested estimators to one simulated sample."""
    t0 = time.perf_counter()
    data, rng = gen_sample(config, rep_index, return_rng=True)
    est, mape, errs = {}, {}, {}
    if "ML" in config.estimators:
        try:
            est["ML"] = fam.ml_fit(data, NB).theta
        except RobCMLError as err:
            errs["ML"] = str(err)
    ini = None
    if "INI" in config.estimators or "CML" in config.estimators:
        try:
            ini = initial_estimate(data, NB, config.mt).theta
            est["INI"] = ini
        except RobCMLError as err:
            errs["INI"] = str(err)
    if "CML" in config.estimators and ini is not None:
        pc = PipelineConfig(zeta1=config.zeta1, zeta2=config.zeta2,
                            replicates=config.cml_replicates,
                            seed=int(rng.integers(2**31)), compute_se=False,
                            xatol=config.cml_xatol, fatol=config.cml_fatol, mt=config.mt)
        try:
            est["CML"] = cml_pipeline(data, NB, pc, theta_init=ini).theta
        except RobCMLError as err:
            errs["CML"] = str(err)
    if "INI" not in config.estimators:
        est.pop("INI", None)
    for k, th in est.items():
        mape[k] = _mape_rows(th, data, config.beta0)
    return RepOutcome(rep_index, {k: v.as_dict() for k, v in est.items()}, mape,
                      time.perf_counter() - t0, errs)


@dataclass
class SimResult:
    config: SimConfig
    maee_beta: dict
    maee_alpha: dict
    mape: dict
    efficiency_beta: dict
    efficiency_alpha: dict
    efficiency_mape: dict
    raw: list
    failures: dict

    def table(self) -> str:
        c = self.config
        head = f"n={c.n} reps={c.reps} alpha0={c.alpha0}"
        if c.contamination is not None:
            head += (f" contamination={c.contamination.fraction:g}"
                     f" y_out={c.contamination.y_out:g}")
        lines = [head, f"{'estimator':<10}{'MAEE(b)':>10}{'MAEE(a)':>10}{'MAPE':>10}"
                       f"{'eff(b)':>10}{'eff(a)':>10}{'eff(mu)':>10}"]
        for k in self.maee_beta:
            lines.append(f"{k:<10}{self.maee_beta[k]:>10.3f}{self.maee_alpha[k]:>10.3f}"
                         f"{self.mape[k]:>10.3f}{_fmt(self.efficiency_beta.get(k))}"
                         f"{_fmt(self.efficiency_alpha.get(k))}{_fmt(self.efficiency_mape.get(k))}")
        return "\n".join(lines)

    def raw_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        p = len(self.config.beta0)
        w.writerow(["rep", "estimator"] + [f"beta{j}" for j in range(p)]
                   + ["alpha", "abs_err_beta", "abs_err_alpha", "mape"])
        for r in self.raw:
            for k, th in r.estimates.items():
                b = np.asarray(th["beta"])
                w.writerow([r.rep, k] + [f"{v:.10g}" for v in b]
                           + [f"{th['alpha']:.10g}",
                              f"{np.abs(b - self.config.beta0).sum():.10g}",
                              f"{abs(th['alpha'] - self.config.alpha0):.10g}",
                              f"{r.mape[k]:.10g}"])
        return buf.getvalue()


def _fmt(v):
    return f"{'':>10}" if v is None else f"{v:>10.3f}"


def maee_mape(outcomes, beta0, alpha0, config: SimConfig | None = None) -> SimResult:
    """MAEE(β) = mean ‖β̂ − β₀‖₁, MAEE(α) = mean |α̂ − α₀|, MAPE = mean of per-rep mean |μ̂ − μ₀|.

    Efficiencies are ratios MAEE_ML / MAEE_est (and likewise for MAPE);
    replications in which an estimator failed are left out of its averages.
    """
    beta0 = np.asarray(beta0, dtype=float)
    names = []
    for r in outcomes:
        for k in r.estimates:
            if k not in names:
                names.append(k)
    names.sort(key=lambda k: ESTIMATORS.index(k) if k in ESTIMATORS else len(ESTIMATORS))
    mb, ma, mp, fails = {}, {}, {}, {}
    for k in names:
        eb = [np.abs(np.asarray(r.estimates[k]["beta"]) - beta0).sum()
              for r in outcomes if k in r.estimates]
        ea = [abs(r.estimates[k]["alpha"] - alpha0) for r in outcomes if k in r.estimates]
        ep = [r.mape[k] for r in outcomes if k in r.mape]
        mb[k], ma[k], mp[k] = float(np.mean(eb)), float(np.mean(ea)), float(np.mean(ep))
        fails[k] = sum(1 for r in outcomes if k in r.errors)

    def ratio(m):
        if "ML" not in m:
            return {}
        return {k: (m["ML"] / v if v > 0 else float("inf")) for k, v in m.items()}

    return SimResult(config, mb, ma, mp, ratio(mb), ratio(ma), ratio(mp), list(outcomes), fails)


def _worker(args):
    config, idx = args
    return run_replication(config, idx)


def run_experiment(config: SimConfig, workers: int | None = None, progress=None) -> SimResult:
    """Run all replications (optionally in worker processes) and aggregate.

    ``workers`` defaults to the ``ROBCML_THREADS`` environment variable, or
    1.  Results are ordered by replication index, so the aggregate does not
    depend on the number of workers.
    """
    if workers is None:
        workers = int(os.environ.get("ROBCML_THREADS", "1"))
    jobs = [(config, r) for r in range(config.reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outcomes = list(ex.map(_worker, jobs))
    else:
        outcomes = []
        for j in jobs:
            outcomes.append(_worker(j))
            if progress is not None:
                progress(len(outcomes), config.reps)
    outcomes.sort(key=lambda r: r.rep)
    return maee_mape(outcomes, config.beta0, config.alpha0, config)


def figure_csv(results) -> str:
    """Rows (y_out, estimator, MAEE(β), MAEE(α), MAPE) for a sweep over y_out."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["y_out", "estimator", "maee_beta", "maee_alpha", "mape"])
    for res in results:
        y_out = res.config.contamination.y_out if res.config.contamination else ""
        for k in res.maee_beta:
            w.writerow([y_out, k, f"{res.maee_beta[k]:.6g}", f"{res.maee_alpha[k]:.6g}",
                        f"{res.mape[k]:.6g}"])
    return buf.getvalue()
