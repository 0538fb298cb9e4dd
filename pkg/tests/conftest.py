import numpy as np
import pytest

from robcml.cli import ingest_frequencies
from robcml.model import NB, Dataset
from robcml.simulate import SimConfig, gen_sample

# the three extreme stays (115, 198 and 374 days) after the one-day shift
LOS_OUTLIERS = (114.0, 197.0, 373.0)


@pytest.fixture(scope="session")
def los():
    """Length-of-stay frequencies shifted by one day (intercept-only counts)."""
    return ingest_frequencies("builtin:los_frequencies", NB, shift=1.0)


@pytest.fixture(scope="session")
def los_trimmed(los):
    keep = ~np.isin(los.y, LOS_OUTLIERS)
    return los.subset(keep)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def clean_sample():
    """One clean regression sample with five slopes, n = 400."""
    return gen_sample(SimConfig(n=400, reps=1, seed=3), 0)


def nb_dataset(n, beta, alpha, rng):
    beta = np.asarray(beta, dtype=float)
    xstar = rng.standard_normal((n, beta.size - 1))
    X = np.column_stack([np.ones(n), xstar])
    mu = np.exp(X @ beta)
    lam = rng.gamma(1.0 / alpha, alpha * mu)
    return Dataset(rng.poisson(lam).astype(float), X)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, collected from the tests' recorded properties."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) != "call":
                continue
            lines += [v for k, v in rep.user_properties if k == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
