import math

import numpy as np
import pytest
from scipy import stats

from robcml import family as fam
from robcml.cml import (CmlFit, ConditionalSupport, FitReport, PipelineConfig, cml_exact_objective,
                        cml_fit, cml_pipeline, conditional_logdensity, continuous_cml_objective,
                        discrete_support, inclusion_weights, mcml_objective, rejection_lists,
                        standard_errors, standard_errors_from_objective)
from robcml.errors import DomainError, OverTruncationError
from robcml.model import BETA, NB, Dataset, ThetaEstimate
from robcml.rqr import RqrDiagnostics, rqr_compute

from conftest import nb_dataset


def conditional_pmf(y, a, b, mu, alpha):
    sup = discrete_support(a, b, mu, alpha)
    return fam.nb_pmf(y, mu, alpha) * sup.weight(y) / sup.Q[0]


class TestDiscreteSupport:
    def test_geometric_example(self):
        sup = discrete_support(0.4, 0.9, 1.0, 1.0)
        assert sup.y_star_a[0] == -1 and sup.y_star_b[0] == 2
        assert sup.T_a[0] == 1 and sup.T_b[0] == 2
        assert sup.t_a[0] == pytest.approx(0.2)
        assert sup.t_b[0] == pytest.approx(0.6)

    def test_mass_equals_cutoff_width(self, rng):
        for _ in range(50):
            a = rng.uniform(0, 0.4)
            b = rng.uniform(0.6, 1.0)
            sup = discrete_support(a, b, rng.uniform(0.1, 30), rng.uniform(0.05, 3))
            assert sup.Q[0] == pytest.approx(b - a, abs=1e-12)

    def test_no_truncation(self):
        y = np.arange(0, 300)
        mu, alpha = 4.48, 0.8
        np.testing.assert_allclose(conditional_pmf(y, 0.0, 1.0, mu, alpha),
                                   fam.nb_pmf(y, mu, alpha), rtol=1e-12)

    def test_normalization(self, rng):
        for _ in range(200):
            a = rng.uniform(0, 0.45)
            b = rng.uniform(a + 0.05, 1.0)
            mu, alpha = rng.uniform(0.1, 50), rng.uniform(0.05, 4)
            top = int(stats.nbinom.ppf(1 - 1e-14, 1 / alpha, 1 / (1 + alpha * mu))) + 50
            total = conditional_pmf(np.arange(top), a, b, mu, alpha).sum()
            assert total == pytest.approx(1.0, abs=1e-10)

    def test_partition_identity(self, rng):
        mu, alpha, a, b = 3.12, 0.32, 0.12, 0.83
        n = 10**5
        y = fam.nb_sample(mu, alpha, rng, size=n).astype(float)
        u = rng.uniform(size=n)
        f, F = fam.nb_pmf_cdf(y, np.full(n, mu), np.full(n, alpha))
        z = F - u * f
        by_z = (z >= a) & (z <= b)
        sup = discrete_support(a, b, mu, alpha)
        T_a, T_b, t_a, t_b = sup.T_a[0], sup.T_b[0], sup.t_a[0], sup.t_b[0]
        lower = (y == T_a - 1) & (u <= t_a)
        upper = (y == T_b + 1) & (u >= t_b)
        if T_a - 1 == T_b + 1:
            # one count carries both boundaries: both jitter conditions apply
            by_partition = (T_a <= y) & (y <= T_b) | (lower & upper)
        else:
            by_partition = ((T_a <= y) & (y <= T_b)) | lower | upper
        np.testing.assert_array_equal(by_z, by_partition)

    def test_weight_matches_probability(self, rng):
        mu, alpha, a, b = 2.0, 0.5, 0.3, 0.7
        sup = discrete_support(a, b, mu, alpha)
        y = np.arange(0, 40)
        f, F = fam.nb_pmf_cdf(y.astype(float), np.full(40, mu), np.full(40, alpha))
        # probability over u of F - u f landing in [a, b]
        lo = np.clip((F - b) / f, 0, 1)
        hi = np.clip((F - a) / f, 0, 1)
        np.testing.assert_allclose(sup.weight(y), hi - lo, atol=1e-12)

    def test_over_truncation(self):
        with pytest.raises(DomainError):
            discrete_support(0.5, 0.5, 1.0, 1.0)

    def test_vectorized(self):
        sup = discrete_support(0.1, 0.9, np.array([0.5, 5.0, 50.0]), 0.5)
        assert sup.T_a.shape == (3,) and np.all(np.diff(sup.T_b) > 0)


class TestConditionalDensity:
    def test_continuous_inside(self):
        mu, alpha, a, b = 0.4, 0.1, 0.1, 0.9
        theta = ThetaEstimate([BETA.linear(mu)], alpha)
        y = fam.beta_quantile(0.5, mu, alpha)
        val = conditional_logdensity(y, [1.0], theta, a, b, BETA)
        assert val == pytest.approx(fam.beta_logpdf(y, mu, alpha) - math.log(b - a))

    def test_continuous_outside(self):
        mu, alpha = 0.4, 0.1
        theta = ThetaEstimate([BETA.linear(mu)], alpha)
        y = fam.beta_quantile(0.95, mu, alpha)
        assert conditional_logdensity(y, [1.0], theta, 0.1, 0.9, BETA) == -math.inf

    def test_discrete_boundary(self):
        theta = ThetaEstimate([0.0], 1.0)
        sup = discrete_support(0.4, 0.9, 1.0, 1.0)
        val = conditional_logdensity(0, [1.0], theta, 0.4, 0.9, NB)
        assert val == pytest.approx(math.log(0.5) + math.log(sup.t_a[0]) - math.log(sup.Q[0]))

    def test_discrete_rejected(self):
        theta = ThetaEstimate([0.0], 1.0)
        assert conditional_logdensity(7, [1.0], theta, 0.4, 0.9, NB) == -math.inf


class TestObjective:
    def test_no_truncation_is_loglik(self, clean_sample):
        theta = ThetaEstimate([1.4, 0.5, 0.2, 0.0, 0.1, 0.0], 0.7)
        assert mcml_objective(theta, clean_sample, 0.0, 1.0, NB) == pytest.approx(
            fam.loglik(theta, clean_sample, NB), rel=1e-12)

    def test_zero_weight_boundary(self):
        # b = F(2) for the geometric case makes t_b = 1, so y = 3 carries no weight
        data = Dataset.from_covariates([3.0])
        theta = ThetaEstimate([0.0], 1.0)
        assert discrete_support(0.1, 0.875, 1.0, 1.0).t_b[0] == pytest.approx(1.0)
        assert mcml_objective(theta, data, 0.1, 0.875, NB) == 0.0

    def test_hand_expansion(self):
        y = np.array([0.0, 1.0, 2.0, 3.0, 5.0])
        data = Dataset.from_covariates(y)
        theta = ThetaEstimate([0.0], 1.0)
        a, b = 0.4, 0.9
        Q = 0.875 - 0.5 + 0.5 * 0.2 + 0.0625 * 0.4
        expected = (0.2 * (math.log(0.5) + math.log(0.2) - math.log(Q))
                    + (math.log(0.25) - math.log(Q))
                    + (math.log(0.125) - math.log(Q))
                    + 0.4 * (math.log(0.0625) + math.log(0.4) - math.log(Q)))
        assert mcml_objective(theta, data, a, b, NB) == pytest.approx(expected, rel=1e-12)

    def test_contributing_rows(self, clean_sample):
        theta = ThetaEstimate([1.5, 0.5, 0.25, 0, 0, 0], 0.8)
        w = inclusion_weights(theta, clean_sample, 0.05, 0.95, NB)
        rejected, *_ = rejection_lists(theta, clean_sample, NB, 0.05, 0.95)
        assert np.count_nonzero(w > 0) == clean_sample.n - rejected.size

    def test_matches_exact_indicator_in_expectation(self, rng):
        # averaging the exact-indicator objective over jitters gives the modified one
        y = fam.nb_sample(3.0, 0.5, rng, size=60).astype(float)
        data = Dataset.from_covariates(y)
        theta = ThetaEstimate([math.log(3.0)], 0.5)
        a, b = 0.1, 0.9
        exact = np.mean([cml_exact_objective(theta, data, a, b,
                                             rqr_compute(theta, data, NB, rng=rng).z)
                         for _ in range(4000)])
        assert mcml_objective(theta, data, a, b, NB) == pytest.approx(exact, rel=0.01)

    def test_continuous_rejects_moved_rows(self):
        y = np.array([0.2, 0.5, 0.8])
        data = Dataset.from_covariates(y)
        theta = ThetaEstimate([0.0], 0.1)
        sel = np.array([True, True, True])
        assert continuous_cml_objective(theta, data, 0.3, 0.7, sel) == -math.inf
        F = fam.beta_cdf(y, 0.5, 0.1)
        inner = (F >= 0.3) & (F <= 0.7)
        val = continuous_cml_objective(theta, data, 0.3, 0.7, inner)
        assert val == pytest.approx(np.sum(fam.beta_logpdf(y[inner], 0.5, 0.1))
                                    - inner.sum() * math.log(0.4))


class TestCmlFit:
    def _diag(self, data, theta, a, b, rng):
        d = rqr_compute(theta, data, NB, rng=rng)
        return RqrDiagnostics(d.z, d.u, a, b)

    @pytest.mark.parametrize("seed", range(3))
    def test_no_truncation_equals_ml(self, seed):
        rng = np.random.default_rng(seed)
        data = nb_dataset(300, [1.0, 0.4, -0.3], 0.6, rng)
        ml = fam.ml_fit(data, NB).theta
        start = fam.default_start(data, NB)
        fit = cml_fit(data, NB, start, self._diag(data, start, 0.0, 1.0, rng))
        assert not fit.diverged
        np.testing.assert_allclose(fit.theta.beta, ml.beta, atol=1e-6)
        assert fit.theta.alpha == pytest.approx(ml.alpha, abs=1e-6)

    def test_improves_on_start(self, clean_sample, rng):
        start = ThetaEstimate([1.3, 0.4, 0.3, 0.05, 0, 0], 1.0)
        diag = rqr_compute(start, clean_sample, NB, rng=rng).with_cutoffs()
        fit = cml_fit(clean_sample, NB, start, diag)
        w = inclusion_weights(start, clean_sample, diag.a_tilde, diag.b_tilde, NB)
        f0 = mcml_objective(start, clean_sample, diag.a_tilde, diag.b_tilde, NB, weights=w)
        f1 = mcml_objective(fit.theta, clean_sample, diag.a_tilde, diag.b_tilde, NB, weights=w)
        assert fit.diverged or f1 >= f0
        assert fit.objective == pytest.approx(f1, rel=1e-10)

    def test_needs_cutoffs(self, clean_sample, rng):
        theta = ThetaEstimate([1.5, 0.5, 0.25, 0, 0, 0], 0.8)
        with pytest.raises(DomainError):
            cml_fit(clean_sample, NB, theta, rqr_compute(theta, clean_sample, NB, rng=rng))

    def test_non_finite_start_is_flagged(self, rng):
        y = fam.beta_sample(0.5, 0.05, rng, size=50)
        data = Dataset.from_covariates(y)
        good = ThetaEstimate([0.0], 0.05)
        diag = RqrDiagnostics(rqr_compute(good, data, BETA).z, None, 0.0, 1.0)
        diag.a_tilde, diag.b_tilde = 0.2, 0.8
        # residuals select rows at one estimate, but the start puts them outside [a, b]
        bad = ThetaEstimate([2.0], 0.05)
        fit = cml_fit(data, BETA, bad, diag)
        assert isinstance(fit, CmlFit) and fit.diverged
        np.testing.assert_array_equal(fit.theta.beta, bad.beta)

    def test_beta_fit(self, rng):
        x = rng.standard_normal(400)
        y = fam.beta_sample(BETA.mean(-0.3 + 0.6 * x), 0.05, rng)
        data = Dataset.from_covariates(y, x)
        report = cml_pipeline(data, BETA, PipelineConfig(seed=1, compute_se=False))
        np.testing.assert_allclose(report.theta.beta, [-0.3, 0.6], atol=0.15)
        assert report.theta.alpha == pytest.approx(0.05, abs=0.03)


class TestStandardErrors:
    def test_quadratic(self):
        A = np.array([[4.0, 1.0], [1.0, 2.0]])
        fun = lambda x: 0.5 * x @ A @ x
        se = standard_errors_from_objective(fun, np.zeros(2))
        np.testing.assert_allclose(se, np.sqrt(np.diag(np.linalg.inv(A))), rtol=1e-6)

    def test_not_positive_definite(self):
        assert standard_errors_from_objective(lambda x: -(x @ x), np.zeros(2)) is None

    def test_no_truncation_matches_information(self, rng):
        mu, alpha, n = 4.0, 0.5, 5000
        data = Dataset.from_covariates(fam.nb_sample(mu, alpha, rng, size=n).astype(float))
        theta = fam.ml_fit(data, NB).theta
        se = standard_errors(theta, data, NB, 0.0, 1.0)
        m = math.exp(theta.beta1)
        # Fisher information of log(mu) for NB is n mu / (1 + alpha mu)
        assert se[0] == pytest.approx(math.sqrt((1 + theta.alpha * m) / (n * m)), rel=0.02)

    def test_matches_monte_carlo_sd(self):
        mu, alpha, n = 4.0, 0.5, 10**4
        est, ses = [], []
        for r in range(200):
            rng = np.random.default_rng(1000 + r)
            y = fam.nb_sample(mu, alpha, rng, size=n).astype(float)
            # the intercept-only ML mean is the sample mean
            est.append(y.mean())
            if r < 10:
                data = Dataset.from_covariates(y)
                theta = fam.ml_fit(data, NB, xatol=1e-6).theta
                ses.append(math.exp(theta.beta1) * standard_errors(theta, data, NB, 0.0, 1.0)[0])
        assert np.mean(ses) == pytest.approx(np.std(est, ddof=1), rel=0.15)


class TestPipeline:
    def test_intercept_only(self, los_trimmed):
        report = cml_pipeline(los_trimmed, NB, PipelineConfig(replicates=5, seed=3))
        assert len(report.theta.beta) == 1
        assert 2.0 < math.exp(report.theta.beta1) < 5.0
        assert set(report.support) == {"T_a", "T_b", "t_a", "t_b"}

    def test_deterministic(self, los):
        cfg = PipelineConfig(replicates=4, seed=11)
        assert cml_pipeline(los, NB, cfg).to_json() == cml_pipeline(los, NB, cfg).to_json()

    def test_seed_changes_result(self, los):
        r1 = cml_pipeline(los, NB, PipelineConfig(replicates=4, seed=1, compute_se=False))
        r2 = cml_pipeline(los, NB, PipelineConfig(replicates=4, seed=2, compute_se=False))
        assert r1.estimate != r2.estimate

    def test_report_roundtrip(self, los):
        report = cml_pipeline(los, NB, PipelineConfig(replicates=3, seed=5))
        again = FitReport.from_json(report.to_json())
        assert again == report
        assert len(report.replicates) == 3
        assert all(len(t["cutoffs"]) == 2 for t in report.replicates)
        assert report.standard_errors is None or len(report.standard_errors) == 2

    def test_extreme_stays_rejected(self, los):
        report = cml_pipeline(los, NB, PipelineConfig(replicates=5, seed=9, compute_se=False))
        big = set(np.flatnonzero(los.y >= 100).tolist())
        assert big <= set(report.rejected)

    def test_regression(self, clean_sample):
        report = cml_pipeline(clean_sample, NB, PipelineConfig(replicates=3, seed=0))
        np.testing.assert_allclose(report.theta.beta, [1.5, 0.5, 0.25, 0, 0, 0], atol=0.2)
        assert report.standard_errors is not None and len(report.standard_errors) == 7

    def test_averages_replicates(self, los):
        report = cml_pipeline(los, NB, PipelineConfig(replicates=3, seed=5, compute_se=False))
        finals = [t["thetas"][-1] for t in report.replicates]
        assert report.estimate["alpha"] == pytest.approx(np.mean([f["alpha"] for f in finals]))
        cuts = np.array([t["cutoffs"][-1] for t in report.replicates])
        assert report.mean_cutoffs == pytest.approx(tuple(cuts.mean(axis=0)))

    def test_invalid_config(self):
        with pytest.raises(DomainError):
            PipelineConfig(replicates=0)
        with pytest.raises(DomainError):
            PipelineConfig(zeta1=0.9, zeta2=0.1)
