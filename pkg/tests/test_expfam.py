import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from lllbayes.errors import InvalidParameter, MeanUndefined, NumericalFailure, PosteriorImproper
from lllbayes.expfam import (
    SCHEMAS,
    SUFFICIENT_STATS,
    GaussianParams,
    InvWishartParams,
    LikelihoodOffset,
    NaturalParam,
    check_conjugacy_scalar,
    conjugate_update,
    gaussian_log_partition,
    gaussian_to_natural,
    invwishart_logpdf,
    invwishart_mean,
    invwishart_to_natural,
    linear_gaussian_offset,
    natural_dot,
    natural_to_gaussian,
    natural_to_invwishart,
    normalize_scalar_density,
    sin_example_offset,
    trig_loglik,
)
from lllbayes.lll import IGammaParams, igamma_neg2_loglik, igamma_solution_offsets
from lllbayes.oracle import RngStream, sample_invwishart

from .conftest import random_spd


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestGaussianNatural:
    def test_identity_case(self):
        eta = gaussian_to_natural(GaussianParams(np.zeros(2), np.eye(2)))
        np.testing.assert_array_equal(eta.values[0], np.zeros(2))
        np.testing.assert_allclose(eta.values[1], -0.5 * np.eye(2))

    def test_scalar_case(self):
        eta = gaussian_to_natural(GaussianParams([1.0], [[4.0]]))
        assert eta.values[0][0] == pytest.approx(0.25)
        assert eta.values[1][0, 0] == pytest.approx(-0.125)

    def test_inverse_cases(self):
        p = natural_to_gaussian(NaturalParam("gaussian", (np.zeros(2), -0.5 * np.eye(2))))
        np.testing.assert_allclose(p.cov, np.eye(2))
        p = natural_to_gaussian(NaturalParam("gaussian", ([0.25], [[-0.125]])))
        assert p.mean[0] == pytest.approx(1.0)
        assert p.cov[0, 0] == pytest.approx(4.0)

    def test_against_direct_solves(self, rng):
        Sigma = random_spd(rng, 3)
        mu = rng.standard_normal(3)
        eta = gaussian_to_natural(GaussianParams(mu, Sigma))
        np.testing.assert_allclose(Sigma @ eta.values[0], mu, atol=1e-12)
        np.testing.assert_allclose(-2.0 * eta.values[1] @ Sigma, np.eye(3), atol=1e-12)

    @pytest.mark.parametrize("d", [1, 2, 4])
    def test_round_trip(self, d, rng):
        worst = 0.0
        for _ in range(100):
            p = GaussianParams(rng.standard_normal(d), random_spd(rng, d))
            q = natural_to_gaussian(gaussian_to_natural(p))
            worst = max(worst, rel(q.mean, p.mean), rel(q.cov, p.cov))
        assert worst < 1e-12

    def test_log_partition_values(self):
        eta = gaussian_to_natural(GaussianParams(np.zeros(2), np.eye(2)))
        assert gaussian_log_partition(eta) == pytest.approx(0.0, abs=1e-15)
        eta = gaussian_to_natural(GaussianParams([1.0], [[4.0]]))
        assert gaussian_log_partition(eta) == pytest.approx(0.125 + 0.5 * math.log(4.0))
        assert gaussian_log_partition(eta) == pytest.approx(0.8181, abs=1e-4)

    def test_log_partition_against_quadrature(self):
        # A = log of int (2 pi)^(-1/2) exp(eta1 x + eta2 x^2) dx
        eta = gaussian_to_natural(GaussianParams([0.7], [[2.3]]))
        a, b = eta.values[0][0], eta.values[1][0, 0]
        x = np.linspace(-40, 40, 400001)
        val = np.trapezoid(np.exp(a * x + b * x * x), x) / math.sqrt(2 * math.pi)
        assert gaussian_log_partition(eta) == pytest.approx(math.log(val), rel=1e-10)

    def test_rejects_asymmetric_covariance(self):
        with pytest.raises(InvalidParameter):
            GaussianParams(np.zeros(2), [[1.0, 0.1], [0.0, 1.0]])

    def test_symmetrize_within_tolerance(self):
        p = GaussianParams(np.zeros(2), [[1.0, 0.1], [0.1 + 1e-14, 1.0]])
        np.testing.assert_array_equal(p.cov, p.cov.T)

    def test_domain_violation(self):
        with pytest.raises(InvalidParameter):
            NaturalParam("gaussian", (np.zeros(2), 0.5 * np.eye(2)))


class TestInvWishartNatural:
    def test_values(self):
        eta = invwishart_to_natural(InvWishartParams(7, np.eye(2)))
        assert eta.values[0] == -3.5
        np.testing.assert_array_equal(eta.values[1], -0.5 * np.eye(2))

    def test_round_trip(self, rng):
        for _ in range(50):
            p = InvWishartParams(rng.uniform(5, 50), random_spd(rng, 2))
            q = natural_to_invwishart(invwishart_to_natural(p))
            assert abs(q.dof - p.dof) <= 1e-12 * p.dof
            assert rel(q.scale, p.scale) < 1e-12

    def test_exponent_at_identity(self, rng):
        V = random_spd(rng, 2)
        eta = invwishart_to_natural(InvWishartParams(9, V))
        val = natural_dot(eta, SUFFICIENT_STATS["invwishart"](np.eye(2)))
        assert val == pytest.approx(np.trace(-0.5 * V))

    @pytest.mark.parametrize(
        "nu, V, expected",
        [(7, np.eye(2), np.eye(2)), (10, np.diag([8.0, 4.0]), np.diag([2.0, 1.0]))],
    )
    def test_mean(self, nu, V, expected):
        np.testing.assert_allclose(invwishart_mean(InvWishartParams(nu, V)), expected)

    def test_mean_undefined(self):
        with pytest.raises(MeanUndefined):
            invwishart_mean(InvWishartParams(5.5, np.eye(2)))

    def test_dof_must_exceed_2d(self):
        with pytest.raises(InvalidParameter):
            InvWishartParams(4.0, np.eye(2))

    def test_mean_against_samples(self):
        p = InvWishartParams(12.0, np.array([[8.0, 1.0], [1.0, 4.0]]))
        draws = sample_invwishart(RngStream(5, (1,)), p.dof, p.scale, 100_000)
        assert rel(draws.mean(axis=0), invwishart_mean(p)) < 0.02

    def test_logpdf_matches_scipy(self, rng):
        # scipy's invwishart(df, scale) has |X|^-(df+d+1)/2, so df = nu - d - 1
        V = random_spd(rng, 2)
        X = random_spd(rng, 2)
        p = InvWishartParams(11.0, V)
        ref = stats.invwishart(df=p.dof - 3, scale=V).logpdf(X)
        assert invwishart_logpdf(X, p) == pytest.approx(ref, rel=1e-10)


class TestConjugateUpdate:
    def test_zero_offset(self, rng):
        eta = gaussian_to_natural(GaussianParams(rng.standard_normal(3), random_spd(rng, 3)))
        out = conjugate_update(eta, LikelihoodOffset.zeros("gaussian", 3))
        for a, b in zip(out.values, eta.values):
            np.testing.assert_array_equal(a, b)

    def test_scalar_blocks(self):
        prior = NaturalParam("igamma", (-2.0, -1.0))
        out = conjugate_update(prior, LikelihoodOffset("igamma", (-1.0, -0.5)))
        assert out.values == (-3.0, -1.5)

    def test_blockwise_addition_gaussian_scalar(self):
        prior = NaturalParam("gaussian", ([1.0], [[-1.0]]))
        out = conjugate_update(prior, LikelihoodOffset("gaussian", ([2.0], [[-0.5]])))
        assert out.values[0][0] == 3.0
        assert out.values[1][0, 0] == -1.5

    def test_information_form_blocks(self, rng):
        mu, Sigma = rng.standard_normal(3), random_spd(rng, 3)
        C = rng.standard_normal((2, 3))
        R = random_spd(rng, 2)
        y = rng.standard_normal(2)
        out = conjugate_update(
            gaussian_to_natural(GaussianParams(mu, Sigma)), linear_gaussian_offset(C, R, y)
        )
        Ri, Si = np.linalg.inv(R), np.linalg.inv(Sigma)
        np.testing.assert_allclose(out.values[0], C.T @ Ri @ y + Si @ mu, rtol=1e-10)
        np.testing.assert_allclose(out.values[1], -0.5 * C.T @ Ri @ C - 0.5 * Si, rtol=1e-10)

    def test_matches_gain_form_kalman(self, rng):
        for _ in range(100):
            mu, P = rng.standard_normal(4), random_spd(rng, 4)
            C = rng.standard_normal((2, 4))
            R = random_spd(rng, 2)
            y = rng.standard_normal(2)
            post = natural_to_gaussian(
                conjugate_update(
                    gaussian_to_natural(GaussianParams(mu, P)), linear_gaussian_offset(C, R, y)
                )
            )
            S = C @ P @ C.T + R
            K = P @ C.T @ np.linalg.inv(S)
            assert rel(post.mean, mu + K @ (y - C @ mu)) < 1e-10
            assert rel(post.cov, P - K @ S @ K.T) < 1e-10

    def test_additivity(self, rng):
        eta = gaussian_to_natural(GaussianParams(rng.standard_normal(2), random_spd(rng, 2)))
        l1 = linear_gaussian_offset(np.eye(2), random_spd(rng, 2), rng.standard_normal(2))
        l2 = linear_gaussian_offset(rng.standard_normal((1, 2)), [[2.0]], [0.3])
        a = conjugate_update(conjugate_update(eta, l1), l2)
        b = conjugate_update(eta, l1 + l2)
        for x, y in zip(a.values, b.values):
            np.testing.assert_allclose(x, y, rtol=1e-14, atol=1e-14)

    def test_schema_mismatch_is_error(self):
        eta = NaturalParam("igamma", (-3.0, -1.0))
        with pytest.raises(InvalidParameter):
            conjugate_update(eta, LikelihoodOffset("gamma", (0.0, 0.0)))

    def test_dimension_mismatch_is_error(self):
        eta = NaturalParam("gaussian", (np.zeros(2), -0.5 * np.eye(2)))
        with pytest.raises(InvalidParameter):
            conjugate_update(eta, LikelihoodOffset.zeros("gaussian", 3))

    def test_wrong_block_count(self):
        with pytest.raises(InvalidParameter):
            LikelihoodOffset("trig", (0.0, 0.0))

    def test_improper_posterior(self):
        eta = NaturalParam("igamma", (-3.0, -0.05))
        with pytest.raises(PosteriorImproper):
            conjugate_update(eta, LikelihoodOffset("igamma", (0.0, 0.25)))

    def test_schemas_list_every_family(self):
        assert set(SUFFICIENT_STATS) == set(SCHEMAS)
        for fam, stat in SUFFICIENT_STATS.items():
            assert [lbl for lbl, _ in stat.blocks] == [lbl for lbl, _ in SCHEMAS[fam]]


@given(
    mu=st.floats(-5, 5),
    var=st.floats(0.05, 20.0),
    c=st.floats(-3, 3),
    r=st.floats(0.05, 10.0),
    y=st.floats(-10, 10),
)
def test_scalar_gaussian_update_property(mu, var, c, r, y):
    prior = gaussian_to_natural(GaussianParams([mu], [[var]]))
    post = natural_to_gaussian(conjugate_update(prior, linear_gaussian_offset([[c]], [[r]], [y])))
    post_var = 1.0 / (1.0 / var + c * c / r)
    assert post.cov[0, 0] == pytest.approx(post_var, rel=1e-10)
    assert post.mean[0] == pytest.approx(post_var * (mu / var + c * y / r), rel=1e-9, abs=1e-9)
    assert post.cov[0, 0] <= var * (1 + 1e-12)


class TestTrigExample:
    def test_offset_y0(self):
        off = sin_example_offset(0.0)
        assert off.values == pytest.approx((-1 / 24, 0.0, 1.0, 0.0))

    def test_offset_y3(self):
        off = sin_example_offset(3.0)
        assert off.values == pytest.approx((-1 / 24, 0.25, math.cos(3), math.sin(3)))

    def test_posterior_first_block(self):
        post = conjugate_update(NaturalParam("trig", (-0.1, 0, 0, 0)), sin_example_offset(3.0))
        assert post.values[0] == pytest.approx(-1 / 24 - 1 / 10)

    @given(x=st.floats(-20, 20), y=st.floats(-20, 20))
    def test_offset_reproduces_loglik_up_to_y_term(self, x, y):
        # log-lik = lambda . T(x) + (-y^2/24), since cos(y-x) = cos y cos x + sin y sin x
        off = sin_example_offset(y)
        val = natural_dot(off, SUFFICIENT_STATS["trig"](x)) - y * y / 24
        assert val == pytest.approx(trig_loglik(x, y), abs=1e-9)


class TestNormalizeScalarDensity:
    def test_standard_normal(self):
        z, _ = normalize_scalar_density(lambda x: -0.5 * x * x, (-30, 30))
        assert abs(z - math.sqrt(2 * math.pi)) < 1e-9

    def test_integrates_to_one_on_finer_grid(self):
        post = conjugate_update(NaturalParam("trig", (-0.1, 0, 0, 0)), sin_example_offset(3.0))
        a, b, c, d = post.flat()
        _, pdf = normalize_scalar_density(
            lambda x: a * x * x + b * x + c * np.cos(x) + d * np.sin(x), (-30, 30)
        )
        fine = np.linspace(-30, 30, 2 * 2**16 + 1)
        assert abs(np.trapezoid(pdf(fine), fine) - 1.0) < 1e-6

    def test_trig_likelihood_is_multimodal(self):
        x = np.linspace(-10, 16, 5001)
        lik = trig_loglik(x, 3.0)
        interior = (lik[1:-1] > lik[:-2]) & (lik[1:-1] > lik[2:])
        assert interior.sum() >= 2

    def test_non_finite_rejected(self):
        with pytest.raises(NumericalFailure):
            normalize_scalar_density(lambda x: np.where(x > 0.5, np.nan, -x * x), (-1, 1), 2049)

    def test_too_few_points(self):
        with pytest.raises(InvalidParameter):
            normalize_scalar_density(lambda x: -x * x, (-1, 1), 100)


class TestCheckConjugacy:
    def test_gaussian_linear_likelihood(self):
        prior = gaussian_to_natural(GaussianParams([0.0], [[1.0]]))
        report = check_conjugacy_scalar(
            prior,
            lambda y: linear_gaussian_offset([[1.0]], [[1.0]], [y]),
            0.7,
            log_base=lambda y: -0.5 * y * y,
        )
        assert report.linear_in_statistic
        assert report.likelihood_integrable_y is True
        assert report.posterior_integrable_x is True
        assert report.conjugate

    def _variance_report(self, k, y=2.0):
        prior = IGammaParams(3.0, 2.0)
        x_hat, s2 = 1.0, 1.0
        t_hat = np.array([0.0, 1.0])

        def offset_fn(yy):
            return igamma_solution_offsets(prior, s2, yy, x_hat)[k].offset

        def log_base(yy):
            return -0.5 * igamma_neg2_loglik(x_hat, s2, yy) - offset_fn(yy).flat() @ t_hat

        return check_conjugacy_scalar(
            prior.natural(), offset_fn, y, log_base, x_probes=(0.5, 2.0, 20.0, 100.0)
        )

    def test_solution1_not_integrable_in_y(self):
        assert self._variance_report(0).likelihood_integrable_y is False

    def test_solution3_conjugate(self):
        report = self._variance_report(2)
        assert report.likelihood_integrable_y is True
        assert report.posterior_integrable_x is True

    def test_non_scalar_family_rejected(self):
        prior = invwishart_to_natural(InvWishartParams(7, np.eye(2)))
        with pytest.raises(InvalidParameter):
            check_conjugacy_scalar(prior, lambda y: None, 0.0)


@given(
    c=st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    r=st.lists(st.floats(0.05, 10.0), min_size=3, max_size=3),
    y=st.lists(st.floats(-10, 10), min_size=3, max_size=3),
)
def test_sequential_updates_commute(c, r, y):
    prior = gaussian_to_natural(GaussianParams([0.5], [[4.0]]))
    offsets = [linear_gaussian_offset([[ci]], [[ri]], [yi]) for ci, ri, yi in zip(c, r, y)]
    forward, backward = prior, prior
    for lam in offsets:
        forward = conjugate_update(forward, lam)
    for lam in reversed(offsets):
        backward = conjugate_update(backward, lam)
    batch = conjugate_update(prior, offsets[0] + offsets[1] + offsets[2])
    for a, b, d in zip(forward.values, backward.values, batch.values):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(a, d, rtol=1e-12, atol=1e-12)
