import numpy as np
import pytest

from gcate.expfam import DomainError, family
from gcate.model import (
    GlmDataset,
    build_theta,
    deviance,
    loss_gradients,
    neg_log_likelihood,
)

FAMILIES = [
    family("gaussian"),
    family("bernoulli"),
    family("binomial", 4),
    family("poisson"),
    family("negbin", 1.5, "canonical"),
]


def draw_response(rng, fam, theta):
    mu = fam.mean(theta)
    if fam.kind == "gaussian":
        return mu + rng.standard_normal(theta.shape)
    if fam.kind == "bernoulli":
        return rng.binomial(1, mu).astype(float)
    if fam.kind == "binomial":
        return rng.binomial(int(fam.aux), mu / fam.aux).astype(float)
    if fam.kind == "poisson":
        return rng.poisson(mu).astype(float)
    phi = np.broadcast_to(np.asarray(fam.aux, dtype=float), theta.shape)
    return rng.negative_binomial(phi, phi / (phi + mu)).astype(float)


def feasible_theta(rng, fam, shape, scale=0.8):
    theta = scale * rng.standard_normal(shape)
    if fam.kind == "negbin":
        theta = -0.3 - np.abs(theta)
    return theta


class TestBuildTheta:
    def test_zero_factors(self):
        X = np.ones((4, 1))
        B = np.zeros((3, 1))
        Z = np.zeros((4, 2))
        G = np.zeros((3, 2))
        assert np.all(build_theta(X, B, Z, G) == 0)

    def test_intercept_constant(self):
        X = np.ones((5, 1))
        B = np.full((3, 1), 2.5)
        G = np.zeros((3, 2))
        Z = np.zeros((5, 2))
        out = build_theta(X, B, Z, G)
        assert np.allclose(out, 2.5)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        n, d, p, r = 3, 2, 4, 2
        X = rng.standard_normal((n, d))
        B = rng.standard_normal((p, d))
        Z = rng.standard_normal((n, r))
        G = rng.standard_normal((p, r))
        out = build_theta(X, B, Z, G)
        ref = np.zeros((n, p))
        for i in range(n):
            for j in range(p):
                for k in range(d):
                    ref[i, j] += X[i, k] * B[j, k]
                for k in range(r):
                    ref[i, j] += Z[i, k] * G[j, k]
        assert np.allclose(out, ref, atol=0, rtol=0) or np.max(np.abs(out - ref)) < 1e-14

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            build_theta(np.ones((4, 2)), np.ones((3, 1)))
        with pytest.raises(ValueError):
            build_theta(np.ones((4, 2)), np.ones((3, 2)), np.ones((4, 2)), np.ones((3, 3)))


class TestNegLogLikelihood:
    def test_poisson_zero_matrix(self):
        n, p = 6, 5
        Y = np.zeros((n, p))
        theta = np.zeros((n, p))
        assert neg_log_likelihood(Y, theta, family("poisson")) == pytest.approx(p)

    def test_gaussian_saturated(self):
        rng = np.random.default_rng(1)
        Y = rng.standard_normal((7, 3))
        got = neg_log_likelihood(Y, Y, family("gaussian"))
        assert got == pytest.approx(-np.sum(Y**2) / (2 * 7), rel=1e-12)

    def test_single_cell_poisson(self):
        got = neg_log_likelihood(np.array([[3.0]]), np.array([[1.0]]), family("poisson"))
        assert got == pytest.approx(np.e - 3.0, rel=1e-12)

    def test_negbin_domain_error(self):
        nb = family("negbin", 1.0, "canonical")
        with pytest.raises(DomainError):
            neg_log_likelihood(np.ones((2, 2)), np.zeros((2, 2)), nb)


class TestDeviance:
    def test_poisson_hand_value(self):
        # y=1, theta=0: log p = -1 - log(1!) = -1, deviance = 2
        got = deviance(np.array([[1.0]]), np.array([[0.0]]), family("poisson"))
        assert got == pytest.approx(2.0, rel=1e-12)

    @pytest.mark.parametrize("fam", FAMILIES, ids=lambda f: f.kind)
    def test_saturated_minimizes_single_cell(self, fam):
        rng = np.random.default_rng(2)
        theta0 = feasible_theta(rng, fam, (1, 1))
        y = np.maximum(draw_response(rng, fam, theta0), 0.0)
        if fam.kind in ("poisson", "negbin"):
            y = np.maximum(y, 1.0)  # keep the saturated theta finite
        grid = np.linspace(-6, -1e-3, 600) if fam.kind == "negbin" else np.linspace(-6, 6, 600)
        vals = [deviance(y, np.array([[t]]), fam) for t in grid]
        mu_grid = np.array([fam.mean(t) for t in grid])
        t_star = grid[np.argmin(np.abs(mu_grid - y[0, 0]))]
        assert min(vals) >= deviance(y, np.array([[t_star]]), fam) - 1e-6

    @pytest.mark.parametrize("fam", FAMILIES, ids=lambda f: f.kind)
    def test_cross_check_with_nll(self, fam):
        rng = np.random.default_rng(3)
        theta = feasible_theta(rng, fam, (5, 4))
        Y = draw_response(rng, fam, theta)
        dev = deviance(Y, theta, fam)
        nll = neg_log_likelihood(Y, theta, fam)
        h = float(np.sum(fam.log_base_measure(Y)))
        assert dev == pytest.approx(2.0 * (5 * nll - h), rel=1e-10)


class TestGradientsAndConvexity:
    @pytest.mark.parametrize("fam", FAMILIES, ids=lambda f: f.kind)
    def test_gradients_match_finite_differences(self, fam):
        rng = np.random.default_rng(4)
        n, p, d, r = 6, 5, 2, 2
        X = np.column_stack([rng.standard_normal(n), np.ones(n)])
        for _ in range(3):
            B = 0.2 * rng.standard_normal((p, d))
            Z = 0.3 * rng.standard_normal((n, r))
            G = 0.3 * rng.standard_normal((p, r))
            X_use = X
            theta = X_use @ B.T + Z @ G.T
            if fam.kind == "negbin":
                # shift the intercept so theta stays strictly negative
                B[:, 1] -= theta.max() + 0.3
                theta = X_use @ B.T + Z @ G.T
            Y = draw_response(rng, fam, fam.natural_param(theta))
            gB, gZ, gG = loss_gradients(Y, X_use, B, Z, G, fam)
            eps = 1e-6
            for arr, grad in ((B, gB), (Z, gZ), (G, gG)):
                idx = (rng.integers(arr.shape[0]), rng.integers(arr.shape[1]))
                orig = arr[idx]
                arr[idx] = orig + eps
                up = neg_log_likelihood(Y, X_use @ B.T + Z @ G.T, fam)
                arr[idx] = orig - eps
                dn = neg_log_likelihood(Y, X_use @ B.T + Z @ G.T, fam)
                arr[idx] = orig
                fd = (up - dn) / (2 * eps)
                assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)

    @pytest.mark.parametrize("fam", FAMILIES, ids=lambda f: f.kind)
    def test_loss_convex_in_theta(self, fam):
        rng = np.random.default_rng(5)
        shape = (4, 3)
        t1 = feasible_theta(rng, fam, shape)
        t2 = feasible_theta(rng, fam, shape)
        Y = draw_response(rng, fam, t1)
        for t in (0.2, 0.5, 0.8):
            mix = neg_log_likelihood(Y, t * t1 + (1 - t) * t2, fam)
            bound = t * neg_log_likelihood(Y, t1, fam) + (1 - t) * neg_log_likelihood(Y, t2, fam)
            assert mix <= bound + 1e-10


class TestDataset:
    def test_validation(self):
        Y = np.ones((5, 3))
        X = np.ones((5, 2))  # rank deficient: two identical columns
        with pytest.raises(ValueError):
            GlmDataset(Y, X)
        ds = GlmDataset(Y, np.column_stack([np.ones(5), np.arange(5)]))
        assert ds.n == 5 and ds.p == 3 and ds.d == 2
        assert len(ds.gene_names) == 3

    def test_default_gene_names_unique(self):
        ds = GlmDataset(np.ones((3, 12)), np.arange(3).reshape(-1, 1) + 1.0)
        assert len(set(ds.gene_names)) == 12
