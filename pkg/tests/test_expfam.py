import numpy as np
import pytest

from gcate.expfam import (
    DomainError,
    ExponentialFamily,
    estimate_dispersion,
    estimate_dispersions,
    family,
    log_partition,
    mean,
    nb_dtheta_dxi,
    nb_log_link_weight,
    nb_theta_from_xi,
    variance,
)

ALL_FAMILIES = [
    family("gaussian"),
    family("bernoulli"),
    family("binomial", 5),
    family("poisson"),
    family("negbin", 1.0, "canonical"),
]


def domain_grid(fam, num=100):
    if fam.kind == "negbin":
        return np.linspace(-16.0, -1.0 / 16.0, num)
    return np.linspace(-16.0, 16.0, num)


class TestTableValues:
    def test_log_partition_poisson_at_zero(self):
        assert log_partition(family("poisson"), 0.0) == pytest.approx(1.0)

    def test_log_partition_gaussian(self):
        assert log_partition(family("gaussian"), 2.0) == pytest.approx(2.0)

    def test_log_partition_negbin(self):
        nb = family("negbin", 1.0, "canonical")
        assert log_partition(nb, -np.log(2.0)) == pytest.approx(np.log(2.0), rel=1e-12)

    def test_poisson_moments(self):
        fam = family("poisson")
        assert mean(fam, 0.0) == pytest.approx(1.0)
        assert variance(fam, 0.0) == pytest.approx(1.0)

    def test_bernoulli_moments(self):
        fam = family("bernoulli")
        assert mean(fam, 0.0) == pytest.approx(0.5)
        assert variance(fam, 0.0) == pytest.approx(0.25)

    def test_negbin_mean(self):
        nb = family("negbin", 1.0, "canonical")
        assert mean(nb, -np.log(2.0)) == pytest.approx(1.0, rel=1e-12)

    def test_binomial_scales_bernoulli(self):
        b5 = family("binomial", 5)
        assert mean(b5, 0.0) == pytest.approx(2.5)
        assert variance(b5, 0.0) == pytest.approx(1.25)

    def test_negbin_domain_error(self):
        nb = family("negbin", 1.0, "canonical")
        with pytest.raises(DomainError):
            log_partition(nb, 0.5)
        with pytest.raises(DomainError):
            mean(nb, np.array([-1.0, 0.0]))


class TestDerivativeConsistency:
    @staticmethod
    def central_diff(f, theta, h):
        # 4th-order central stencil; large enough h to clear the
        # roundoff floor where A' saturates, small truncation error
        return (-f(theta + 2 * h) + 8 * f(theta + h)
                - 8 * f(theta - h) + f(theta - 2 * h)) / (12 * h)

    @pytest.mark.parametrize("fam", ALL_FAMILIES, ids=lambda f: f.kind)
    def test_finite_differences(self, fam):
        theta = domain_grid(fam)
        h = 1e-3 * np.maximum(1.0, np.abs(theta))
        # keep the stencil inside the domain
        if fam.kind == "negbin":
            h = np.minimum(h, -theta / 5)
        a2 = variance(fam, theta)
        assert np.all(a2 > 0)
        d1 = self.central_diff(lambda t: log_partition(fam, t), theta, h)
        d2 = self.central_diff(lambda t: mean(fam, t), theta, h)
        assert np.max(np.abs(d1 - mean(fam, theta)) / np.maximum(np.abs(mean(fam, theta)), 1e-12)) < 1e-6
        assert np.max(np.abs(d2 - a2) / np.abs(a2)) < 1e-6


class TestNbLogLink:
    def test_theta_from_xi_values(self):
        assert nb_theta_from_xi(0.0, 1.0) == pytest.approx(-np.log(2.0), rel=1e-12)
        for phi in (0.3, 1.0, 7.5):
            assert nb_theta_from_xi(np.log(phi), phi) == pytest.approx(-np.log(2.0), rel=1e-12)

    def test_theta_strictly_negative(self):
        xs = np.array([-40.0, -1.0, 0.0, 5.0, 30.0, 700.0, 1000.0])
        th = nb_theta_from_xi(xs, 1.0)
        assert np.all(th < 0)

    def test_weight_values(self):
        assert nb_log_link_weight(0.0, 1.0) == pytest.approx(0.5)
        assert nb_log_link_weight(0.0, 3.0) == pytest.approx(0.75)
        assert nb_log_link_weight(-30.0, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_dtheta_companion(self):
        # dtheta/dxi = weight / e^xi
        xi = np.linspace(-5, 5, 11)
        got = nb_dtheta_dxi(xi, 2.0)
        assert np.allclose(got, nb_log_link_weight(xi, 2.0) * np.exp(-xi), rtol=1e-12)

    def test_log_link_inversion(self):
        nb = family("negbin", 2.5, "canonical")
        xi = np.linspace(-20, 30, 101)
        mu = mean(nb, nb_theta_from_xi(xi, 2.5))
        assert np.max(np.abs(mu - np.exp(xi)) / np.exp(xi)) < 1e-10

    def test_phi_must_be_positive(self):
        with pytest.raises(ValueError):
            nb_theta_from_xi(0.0, -1.0)


class TestDispersion:
    def test_hand_solved(self):
        # second moment 6 around mu=2 -> alpha 1, phi 1
        y = 2.0 + np.sqrt(6.0) * np.array([-1.0, 1.0] * 10)
        assert estimate_dispersion(y, 2.0) == pytest.approx(1.0, rel=1e-12)

    def test_underdispersed_clips_low(self):
        y = np.full(50, 2.0)  # zero variance
        assert estimate_dispersion(y, 2.0) == pytest.approx(100.0)

    def test_overdispersed_clips_high(self):
        y = 2.0 + np.sqrt(402.0) * np.array([-1.0, 1.0] * 10)
        assert estimate_dispersion(y, 2.0) == pytest.approx(0.01)

    def test_duplication_invariance(self):
        rng = np.random.default_rng(3)
        y = rng.poisson(4.0, size=40).astype(float)
        phi1 = estimate_dispersion(y, 4.0)
        phi2 = estimate_dispersion(np.repeat(y, 2), 4.0)
        assert phi1 == pytest.approx(phi2, rel=1e-12)

    def test_invalid_mu(self):
        with pytest.raises(ValueError):
            estimate_dispersion(np.ones(5), 0.0)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(5)
        Y = rng.poisson(3.0, size=(30, 4)).astype(float)
        mus = Y.mean(axis=0) + 0.1
        phis = estimate_dispersions(Y, mus)
        for j in range(4):
            assert phis[j] == pytest.approx(estimate_dispersion(Y[:, j], mus[j]))


class TestFamilyValidation:
    def test_log_link_only_negbin(self):
        with pytest.raises(ValueError):
            ExponentialFamily("poisson", link="log")

    def test_negbin_log_is_default(self):
        assert family("negbin").link == "log"

    def test_binomial_trials_integer(self):
        with pytest.raises(ValueError):
            family("binomial", 2.5)

    def test_response_validation(self):
        with pytest.raises(ValueError):
            family("poisson").validate_response(np.array([[1.0, -2.0]]))
        with pytest.raises(ValueError):
            family("binomial", 3).validate_response(np.array([[4.0]]))
        family("binomial", 3).validate_response(np.array([[3.0, 0.0]]))

    def test_per_gene_aux_broadcast(self):
        nb = family("negbin", np.array([1.0, 2.0]), "log")
        eta = np.zeros((3, 2))
        w = nb.weight_from_eta(eta)
        assert w.shape == (3, 2)
        assert np.allclose(w[0], [0.5, 2.0 / 3.0])
