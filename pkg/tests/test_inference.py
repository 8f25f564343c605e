import numpy as np
import pytest
from scipy.stats import norm

from gcate.expfam import family
from gcate.inference import (
    DebiasConfig,
    bh_adjust,
    bonferroni_cutoff,
    debias_all_genes,
    debias_matrices,
    fwer_test,
    run_inference,
    run_split_inference,
    select_lambda_n,
    solve_projection_u,
    solve_projection_u_per_gene,
    z_statistics,
)
from gcate.model import GlmDataset
from gcate.optimize import OptimOptions
from gcate.pipeline import fit_gcate
from gcate.simulate import SimulationScenario, gen_poisson_scenario


def brute_force_bh(pvals):
    """Independent step-up oracle: reject the largest k with
    p_(k) <= alpha k/m, scanning alpha to invert into q-values."""
    p = np.asarray(pvals, dtype=float)
    m = p.size
    order = np.argsort(p, kind="stable")
    q = np.full(m, np.inf)
    for i, idx in enumerate(order):
        # smallest alpha at which idx is rejected: min over k >= rank of
        # p_(k) m / k
        ranked = p[order] * m / np.arange(1, m + 1)
        q[idx] = ranked[i:].min()
    return np.minimum(q, 1.0)


class TestProjectionU:
    def test_identity_design(self):
        rng = np.random.default_rng(0)
        n, d = 64, 2
        X = np.kron(np.ones(n // 4)[:, None], np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float))
        omega = np.ones(n)
        u = solve_projection_u(X, omega, 0.0)
        assert np.allclose(u, [1.0, 0.0], atol=1e-12)

    def test_diagonal_two_by_two(self):
        n = 50
        X = np.column_stack([np.sqrt(2.0) * np.ones(n), np.ones(n)])
        # force S = diag(2, 1) by alternating signs of col2 and col1
        X[::2, 1] *= -1
        X[1::2, 0] *= -1
        S = X.T @ X / n
        assert np.allclose(S, np.diag([2.0, 1.0]))
        u = solve_projection_u(X, np.ones(n), 0.0)
        assert np.allclose(u, [0.5, 0.0], atol=1e-12)
        assert u @ S @ u == pytest.approx(0.5)

    def test_feasibility_at_positive_lambda(self):
        rng = np.random.default_rng(1)
        X = np.column_stack([rng.choice([-1.0, 1.0], 80), np.ones(80)])
        omega = rng.uniform(0.5, 4.0, 80)
        S = (X * omega[:, None]).T @ X / 80
        e1 = np.array([1.0, 0.0])
        u0 = np.linalg.solve(S, e1)
        for lam in [1e-4, 1e-2, 0.1, 0.5, 2.0]:
            u = solve_projection_u(X, omega, lam)
            assert np.max(np.abs(S @ u - e1)) <= lam + 1e-12
            # objective no worse than the residual-zero point
            assert u @ S @ u <= u0 @ S @ u0 + 1e-10
        # grid check of near-optimality for the box QP
        lam = 0.3
        u = solve_projection_u(X, omega, lam)
        best = u @ S @ u
        for _ in range(2000):
            v = np.clip(rng.uniform(-lam, lam, 2), -lam, lam)
            cand = np.linalg.solve(S, e1 + v)
            assert best <= cand @ S @ cand + 1e-8

    def test_singular_design_raises(self):
        X = np.ones((30, 2))
        X[:, 1] = 2 * X[:, 0]
        with pytest.raises(ValueError, match="singular|collinear"):
            solve_projection_u(np.column_stack([X[:, 0], X[:, 0]]), np.ones(30), 0.0)

    def test_per_gene_matches_scalar_solver(self):
        rng = np.random.default_rng(2)
        n, p = 60, 7
        X = np.column_stack([rng.choice([-1.0, 1.0], n), np.ones(n)])
        Omega = rng.uniform(0.2, 5.0, (n, p))
        lam = 0.05
        U = solve_projection_u_per_gene(X, Omega, lam)
        for j in range(p):
            uj = solve_projection_u(X, Omega[:, j], lam)
            assert np.allclose(U[j], uj, atol=1e-8)

    def test_constant_weights_match_shared(self):
        rng = np.random.default_rng(3)
        n, p = 40, 5
        X = np.column_stack([rng.choice([-1.0, 1.0], n), np.ones(n)])
        Omega = np.full((n, p), 2.5)
        U = solve_projection_u_per_gene(X, Omega, 0.01)
        u = solve_projection_u(X, Omega[:, 0], 0.01)
        assert np.allclose(U - u[None, :], 0.0, atol=1e-10)

    def test_tau_constraint_enforced(self):
        rng = np.random.default_rng(4)
        X = np.column_stack([rng.standard_normal(50) * 3, np.ones(50)])
        u_free = solve_projection_u(X, np.ones(50), 0.05)
        tau = 0.5 * np.max(np.abs(X @ u_free))
        u_tau = solve_projection_u(X, np.ones(50), 0.05, tau_n=tau)
        assert np.max(np.abs(X @ u_tau)) <= tau + 1e-6


class TestDebias:
    def test_zero_residual_keeps_b(self):
        rng = np.random.default_rng(5)
        n, p = 40, 6
        X = np.column_stack([rng.choice([-1.0, 1.0], n), np.ones(n)])
        b = rng.standard_normal(p)
        T = np.zeros((n, p))
        Omega = np.ones((n, p))
        b_de, sigma, _, warn = debias_all_genes(X, b, T, Omega, 0.0)
        assert np.allclose(b_de, b)
        assert np.all(sigma > 0)
        assert not np.any(warn)

    def test_gaussian_no_confounder_equals_ols(self):
        rng = np.random.default_rng(6)
        n, p, d = 80, 12, 2
        X = np.column_stack([rng.standard_normal(n), np.ones(n)])
        B = rng.standard_normal((p, d))
        Y = X @ B.T + rng.standard_normal((n, p))
        fam = family("gaussian")
        b_arbitrary = rng.standard_normal(p)  # any starting point works
        eta = X @ np.column_stack([b_arbitrary, B[:, 1]]).T
        T, Omega = debias_matrices(Y, eta, fam, np.zeros((p, 0)))
        b_de, sigma, u, _ = debias_all_genes(X, b_arbitrary, T, Omega, 0.0)
        ols = np.linalg.lstsq(X, Y, rcond=None)[0].T
        assert np.max(np.abs(b_de - ols[:, 0])) < 1e-8
        S = X.T @ X / n
        se_ref = np.sqrt(np.linalg.inv(S)[0, 0])
        assert np.max(np.abs(sigma - se_ref)) < 1e-8

    def test_sigma_positive(self):
        rng = np.random.default_rng(7)
        n, p = 30, 4
        X = np.column_stack([rng.choice([-1.0, 1.0], n), np.ones(n)])
        T = rng.standard_normal((n, p))
        Omega = rng.uniform(0.1, 2.0, (n, p))
        _, sigma, _, _ = debias_all_genes(X, np.zeros(p), T, Omega, 0.01)
        assert np.all(sigma > 0)


class TestZStatistics:
    def test_zero_gives_unit_pvalue(self):
        z, p = z_statistics(np.array([0.0]), np.array([1.0]), 100)
        assert z[0] == 0.0
        assert p[0] == 1.0

    def test_quantile_value(self):
        z, p = z_statistics(np.array([1.959964 / 10.0]), np.array([1.0]), 100)
        assert p[0] == pytest.approx(0.05, abs=1e-6)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(8)
        b = rng.standard_normal(9)
        s = rng.uniform(0.5, 2.0, 9)
        z1, _ = z_statistics(b, s, 50)
        z2, _ = z_statistics(3.7 * b, 3.7 * s, 50)
        assert np.allclose(z1, z2, rtol=1e-12)


class TestBH:
    def test_hand_worked_example(self):
        p = np.array([0.01, 0.02, 0.5, 0.9])
        q = bh_adjust(p)
        # step-up at alpha=0.2: thresholds 0.05, 0.10, 0.15, 0.20 -> 2 rejections
        assert np.sum(q < 0.2) == 2
        assert set(np.where(q < 0.2)[0]) == {0, 1}

    def test_all_ones(self):
        q = bh_adjust(np.ones(10))
        assert np.all(q == 1.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        p = rng.uniform(size=25)
        q = bh_adjust(p)
        perm = rng.permutation(25)
        q_perm = bh_adjust(p[perm])
        assert np.allclose(q_perm, q[perm], rtol=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            m = int(rng.integers(1, 9))
            p = np.round(rng.uniform(size=m), 3)
            assert np.allclose(bh_adjust(p), brute_force_bh(p), atol=1e-12)

    def test_nan_passthrough(self):
        q = bh_adjust(np.array([0.01, np.nan, 0.5]))
        assert np.isnan(q[1])
        assert np.all(np.isfinite(q[[0, 2]]))

    def test_monotone_in_sorted_order(self):
        rng = np.random.default_rng(11)
        p = rng.uniform(size=40)
        q = bh_adjust(p)
        order = np.argsort(p)
        assert np.all(np.diff(q[order]) >= -1e-15)


class TestFwer:
    def test_single_test_reduces_to_z_alpha(self):
        z = np.array([2.0])
        assert fwer_test(z, 0.05, p=1)[0] == (abs(z[0]) > norm.isf(0.025))

    def test_cutoff_value(self):
        assert bonferroni_cutoff(0.05, 1000) == pytest.approx(4.0556, abs=2e-4)

    def test_strict_inequality(self):
        cutoff = bonferroni_cutoff(0.05, 10)
        z = np.array([cutoff])
        assert not fwer_test(z, 0.05, p=10)[0]


class TestLambdaSelection:
    def test_grid_of_one(self):
        rng = np.random.default_rng(12)
        n, p = 60, 30
        X = np.column_stack([rng.choice([-1.0, 1.0], n), np.ones(n)])
        T = rng.standard_normal((n, p))
        Omega = np.ones((n, p))
        cfg = DebiasConfig(c2_grid=(0.05,))
        lam, c2, scree = select_lambda_n(X, np.zeros(p), T, Omega, family("gaussian"), cfg)
        assert c2 == 0.05
        assert lam == pytest.approx(0.05 * np.sqrt(np.log(n) / n))
        assert len(scree["median"]) == 1

    def test_fallback_warns(self):
        rng = np.random.default_rng(13)
        n, p = 50, 20
        X = np.column_stack([rng.choice([-1.0, 1.0], n), np.ones(n)])
        T = rng.standard_normal((n, p))
        Omega = np.ones((n, p))
        cfg = DebiasConfig(c2_grid=(0.01, 0.1), median_threshold=1e-12)
        with pytest.warns(UserWarning, match="falling back"):
            select_lambda_n(X, np.full(p, 5.0), T, Omega, family("gaussian"), cfg)


class TestSplitInference:
    @pytest.fixture(scope="class")
    def small_scenario(self):
        cfg = SimulationScenario(kind="poisson-bulk", n=80, p=60, r=2, seed=21)
        return gen_poisson_scenario(cfg)

    def test_no_split_equals_default(self, small_scenario):
        dataset, truth = small_scenario
        opts = OptimOptions(max_outer_iters=30)
        cfg = DebiasConfig(split="none", lambda_n=0.01)
        res1 = run_split_inference(dataset, 2, truth["family"], cfg, opts=opts)
        fit = fit_gcate(dataset, 2, truth["family"], opts=opts)
        res2 = run_inference(dataset, fit, cfg)
        assert np.allclose(res1.z, res2.z, equal_nan=True)

    def test_ratio_one_equals_default(self, small_scenario):
        dataset, truth = small_scenario
        opts = OptimOptions(max_outer_iters=30)
        cfg = DebiasConfig(split="half", split_ratio=1.0, lambda_n=0.01)
        res1 = run_split_inference(dataset, 2, truth["family"], cfg, opts=opts)
        fit = fit_gcate(dataset, 2, truth["family"], opts=opts)
        res2 = run_inference(dataset, fit, cfg)
        assert np.allclose(res1.z, res2.z, equal_nan=True)

    def test_split_deterministic_under_seed(self, small_scenario):
        dataset, truth = small_scenario
        opts = OptimOptions(max_outer_iters=20)
        cfg = DebiasConfig(split="half", split_ratio=0.5, lambda_n=0.01, seed=3)
        res1 = run_split_inference(dataset, 2, truth["family"], cfg, opts=opts)
        res2 = run_split_inference(dataset, 2, truth["family"], cfg, opts=opts)
        assert np.array_equal(res1.z, res2.z)

    def test_odd_count_puts_extra_sample_in_estimation_fold(self):
        cfg = SimulationScenario(kind="poisson-bulk", n=81, p=40, r=2, seed=22)
        dataset, truth = gen_poisson_scenario(cfg)
        opts = OptimOptions(max_outer_iters=10)
        dcfg = DebiasConfig(split="half", split_ratio=0.5, lambda_n=0.01)
        res = run_split_inference(dataset, 2, truth["family"], dcfg, opts=opts)
        assert res.z.shape == (40,)

    def test_leave_one_out_runs(self, small_scenario):
        dataset, truth = small_scenario
        sub = GlmDataset(dataset.Y[:, :8], dataset.X,
                         gene_names=dataset.gene_names[:8])
        opts = OptimOptions(max_outer_iters=10)
        cfg = DebiasConfig(split="half", split_ratio=0.5, lambda_n=0.01,
                           leave_one_out=True)
        res = run_split_inference(sub, 2, truth["family"], cfg, opts=opts)
        assert np.sum(np.isfinite(res.z)) >= 6
