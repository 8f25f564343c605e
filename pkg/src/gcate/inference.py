"""Debiased simultaneous inference for one tested covariate.

The penalized estimate b_j of each gene is corrected with a projected,
weighted score term

    b_j^de = b_j + u' (1/n) sum_i x_i (y_i - A'(theta_i))' v_i,

where v_i standardizes the residual by the local curvature and projects
it off the estimated loading space, and u solves the small quadratic
program

    min u' S u   s.t.  ||S u - e_1||_inf <= lambda_n,
    S = (1/n) sum_i omega_i x_i x_i',

so that u' S u is the variance proxy of the correction.  The optional
|x_i'u| <= tau_n constraint is dropped by default.  Under the negbin
log link the same structure applies after the chain rule folds
dtheta/dxi into the residual standardization and the weights become
phi e^xi / (phi + e^xi).

z-statistics are sqrt(n) b^de / sigma with two-sided normal p-values;
q-values come from the Benjamini-Hochberg step-up, and the family-wise
test is the Bonferroni threshold.  lambda_n = c2 sqrt(log n / n) is
selected by scanning a c2 grid and keeping the largest value whose
median z stays inside a small band, with the (normal-consistent) MAD
recorded alongside for diagnostics.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .expfam import LOG, NEGBIN
from .model import InferenceResult, build_theta
from .optimize import col_space_basis, refit_latent_rows

# c2 grid for the lambda_n scan
DEFAULT_C2_GRID = tuple(
    round(c, 4)
    for c in list(np.arange(1, 10) / 1000)
    + list(np.arange(1, 10) / 100)
    + list(np.arange(1, 11) / 10)
)

MEDIAN_THRESHOLD_DEFAULT = 0.1
MEDIAN_THRESHOLD_NEGBIN = 0.025
MAD_SCALE = 1.4826

# Curvature floor for the residual standardization.  Cells whose fitted
# curvature is essentially zero carry no score information, but dividing
# by their curvature would let a single low-mean cell with a nonzero
# count dominate every gene's correction through the projection.
CURVATURE_FLOOR = 0.1


@dataclass
class DebiasConfig:
    coef_index: int = 1  # 1-based column of X under test
    lambda_n: object = "auto"  # "auto", or a fixed c2 multiplier, or 0
    tau_n: float = None  # None drops the |x_i'u| constraint
    # per-gene projection directions are the default: with strongly
    # heterogeneous gene scales a direction solved at gene-averaged
    # weights has the wrong magnitude for most genes
    per_gene_u: bool = True
    split: str = "none"  # "none" or "half"
    split_ratio: float = 0.5  # fraction of samples reserved for inference
    leave_one_out: bool = False
    median_threshold: float = None
    curvature_floor: float = CURVATURE_FLOOR
    c2_grid: tuple = DEFAULT_C2_GRID
    alpha: float = 0.05
    fdr_cut: float = 0.2
    seed: int = 0

    def threshold_for(self, fam):
        if self.median_threshold is not None:
            return self.median_threshold
        return MEDIAN_THRESHOLD_NEGBIN if fam.kind == NEGBIN else MEDIAN_THRESHOLD_DEFAULT


# ---- projection direction ----------------------------------------------


def _check_spd(S):
    evals = np.linalg.eigvalsh(S)
    if evals[0] <= 1e-12 * max(evals[-1], 1.0):
        raise ValueError(
            "weighted design Gram matrix is singular; check X for "
            "collinear or constant columns"
        )
    return evals


def solve_projection_u(X, omega, lambda_n, coef_index=1, tol=1e-10,
                       max_iters=200_000, tau_n=None):
    """Variance-minimizing direction under the score-residual budget.

    With lambda_n = 0 the unique feasible point is u = S^{-1} e_1 and it
    is returned directly.  Otherwise the box-constrained QP is solved by
    projected gradient on the residual v = S u - e_1 (feasible by
    construction at every iterate) to tolerance `tol`.
    """
    X = np.asarray(X, dtype=float)
    omega = np.asarray(omega, dtype=float)
    n, d = X.shape
    S = (X * omega[:, None]).T @ X / n
    evals = _check_spd(S)
    e = np.zeros(d)
    e[coef_index - 1] = 1.0
    u0 = np.linalg.solve(S, e)
    if lambda_n is None or lambda_n <= 0:
        u = u0
    else:
        Sinv = np.linalg.inv(S)
        step = evals[0] / 2.0  # 1/L for f(v) = (v+e)' S^{-1} (v+e)
        v = np.zeros(d)
        for _ in range(max_iters):
            u = Sinv @ (v + e)
            v_new = np.clip(v - step * 2.0 * u, -lambda_n, lambda_n)
            if np.max(np.abs(v_new - v)) < tol:
                v = v_new
                break
            v = v_new
        u = Sinv @ (v + e)
    if tau_n is not None:
        u = _solve_u_with_tau(S, X, e, lambda_n or 0.0, tau_n, u)
    return u


def _solve_u_with_tau(S, X, e, lambda_n, tau_n, u_start):
    """Restores the |x_i'u| <= tau_n constraint (experimentation mode)."""
    from scipy.optimize import minimize

    if np.max(np.abs(X @ u_start)) <= tau_n:
        return u_start
    cons = [
        {"type": "ineq", "fun": lambda u: lambda_n - np.abs(S @ u - e)},
        {"type": "ineq", "fun": lambda u: tau_n - np.abs(X @ u)},
    ]
    res = minimize(
        lambda u: u @ S @ u,
        np.zeros_like(u_start),
        jac=lambda u: 2.0 * S @ u,
        constraints=cons,
        method="SLSQP",
        options={"maxiter": 500, "ftol": 1e-14},
    )
    if not res.success:
        warnings.warn(f"tau_n-constrained QP did not converge: {res.message}")
    return res.x


def solve_projection_u_per_gene(X, Omega, lambda_n, coef_index=1, tol=1e-10,
                                max_iters=200_000):
    """Batched per-gene projection directions (Omega is n x p)."""
    X = np.asarray(X, dtype=float)
    Omega = np.asarray(Omega, dtype=float)
    n, d = X.shape
    p = Omega.shape[1]
    S = np.einsum("np,ni,nk->pik", Omega, X, X) / n
    evals = np.linalg.eigvalsh(S)
    if np.any(evals[:, 0] <= 1e-12 * np.maximum(evals[:, -1], 1.0)):
        raise ValueError("some per-gene Gram matrices are singular")
    e = np.zeros(d)
    e[coef_index - 1] = 1.0
    U0 = np.linalg.solve(S, np.broadcast_to(e, (p, d))[..., None])[..., 0]
    if lambda_n is None or lambda_n <= 0:
        return U0
    Sinv = np.linalg.inv(S)
    steps = evals[:, 0][:, None] / 2.0
    V = np.zeros((p, d))
    for _ in range(max_iters):
        U = np.einsum("pik,pk->pi", Sinv, V + e)
        V_new = np.clip(V - steps * 2.0 * U, -lambda_n, lambda_n)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    return np.einsum("pik,pk->pi", Sinv, V + e)


# ---- debias core --------------------------------------------------------


def debias_matrices(Y, eta, fam, Gamma_hat, curvature_floor=CURVATURE_FLOOR):
    """Standardized residuals T-tilde and curvature weights Omega.

    T-tilde has the estimated loading directions projected out of each
    sample's residual, so the correction only uses the gene coordinates
    orthogonal to the confounding space.  The standardization divides by
    the cell curvature floored at `curvature_floor`: an information-free
    cell contributes (near) zero either way, but its raw inverse
    curvature would amplify a stray count without bound.
    """
    Y = np.asarray(Y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if fam.link == LOG:
        mu = np.exp(eta)
        Omega = fam.weight_from_eta(eta)
        kernel = mu  # A''(theta) dtheta/dxi = e^xi
    else:
        theta = fam.natural_param(eta)
        mu = fam.mean(theta)
        Omega = fam.variance(theta)
        kernel = Omega
    T = (Y - mu) / np.maximum(kernel, curvature_floor)
    Q = col_space_basis(Gamma_hat) if Gamma_hat is not None and Gamma_hat.size else None
    if Q is not None and Q.shape[1] > 0:
        T = T - (T @ Q) @ Q.T
    return T, Omega


def debias_all_genes(X, b_hat, T_tilde, Omega, lambda_n, coef_index=1,
                     per_gene_u=False, tau_n=None):
    """Debiased estimates and standard errors for every gene at once.

    Returns (b_debiased, sigma_hat, u_hat, warn_flags).  In the default
    shared mode u solves the QP at the gene-averaged weights; per-gene
    mode solves one QP per gene and is the literal (slower) reference.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    p = T_tilde.shape[1]
    M = Omega * T_tilde
    bad = ~np.all(np.isfinite(M), axis=0) | ~np.all(np.isfinite(Omega), axis=0)
    if np.any(bad):
        M = np.where(np.isfinite(M), M, 0.0)
    if per_gene_u:
        if tau_n is None:
            U = solve_projection_u_per_gene(X, Omega, lambda_n, coef_index)
        else:
            U = np.stack([
                solve_projection_u(X, Omega[:, j], lambda_n, coef_index, tau_n=tau_n)
                for j in range(p)
            ])
        XU = X @ U.T  # n x p
        corr = np.sum(XU * M, axis=0) / n
        sigma2 = np.sum(XU**2 * Omega, axis=0) / n
        u_hat = U
    else:
        omega_bar = np.mean(Omega, axis=1)
        u = solve_projection_u(X, omega_bar, lambda_n, coef_index, tau_n=tau_n)
        Xu = X @ u
        corr = Xu @ M / n
        sigma2 = (Xu**2) @ Omega / n
        u_hat = u
    b_de = np.asarray(b_hat, dtype=float) + corr
    sigma = np.sqrt(np.maximum(sigma2, 0.0))
    warn = bad | ~np.isfinite(b_de) | ~(sigma > 0)
    b_de = np.where(warn, np.nan, b_de)
    sigma = np.where(warn, np.nan, sigma)
    if np.any(warn):
        warnings.warn(f"{int(np.sum(warn))} genes produced non-finite debias terms")
    return b_de, sigma, u_hat, warn


def z_statistics(b_debiased, sigma_hat, n):
    """t_j = sqrt(n) b_j^de / sigma_j and two-sided normal p-values."""
    b = np.asarray(b_debiased, dtype=float)
    s = np.asarray(sigma_hat, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.sqrt(n) * b / s
        pvals = 2.0 * norm.sf(np.abs(z))
    return z, pvals


def select_lambda_n(X, b_hat, T_tilde, Omega, fam, cfg):
    """Scan the c2 grid; keep the largest c2 with |median z| in band.

    Returns (lambda_n, c2, scree) where scree records median and
    normalized MAD of the z-statistics at every grid value.
    """
    n = X.shape[0]
    scale = np.sqrt(np.log(n) / n)
    threshold = cfg.threshold_for(fam)
    grid = sorted(cfg.c2_grid)
    medians, mads = [], []
    for c2 in grid:
        lam_n = c2 * scale
        b_de, sigma, _, _ = debias_all_genes(
            X, b_hat, T_tilde, Omega, lam_n, cfg.coef_index,
            per_gene_u=cfg.per_gene_u, tau_n=cfg.tau_n,
        )
        z, _ = z_statistics(b_de, sigma, n)
        z = z[np.isfinite(z)]
        med = float(np.median(z)) if z.size else np.nan
        mad = float(MAD_SCALE * np.median(np.abs(z - med))) if z.size else np.nan
        medians.append(med)
        mads.append(mad)
    feasible = [i for i, m in enumerate(medians) if np.isfinite(m) and abs(m) <= threshold]
    if feasible:
        idx = feasible[-1]
    else:
        idx = 0
        warnings.warn(
            "no c2 in the grid kept |median z| within "
            f"{threshold}; falling back to the smallest value"
        )
    scree = {
        "c2": list(grid),
        "lambda_n": [c * scale for c in grid],
        "median": medians,
        "mad": mads,
        "selected_c2": grid[idx],
        "median_threshold": threshold,
    }
    return grid[idx] * scale, grid[idx], scree


def bh_adjust(pvalues):
    """Benjamini-Hochberg step-up adjusted p-values (monotonized).

    Non-finite entries propagate as NaN and do not count toward the
    number of tests.
    """
    p = np.asarray(pvalues, dtype=float)
    out = np.full(p.shape, np.nan)
    finite = np.isfinite(p)
    vals = p[finite]
    if np.any((vals < 0) | (vals > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = vals.size
    if m == 0:
        return out
    order = np.argsort(vals, kind="stable")
    ranked = vals[order] * m / np.arange(1, m + 1)
    q = np.minimum.accumulate(ranked[::-1])[::-1]
    q = np.minimum(q, 1.0)
    restored = np.empty(m)
    restored[order] = q
    out[finite] = restored
    return out


def fwer_test(z, alpha, p=None):
    """Bonferroni decisions: reject when |z| > Phi^{-1}(1 - alpha/(2p))."""
    z = np.asarray(z, dtype=float)
    if p is None:
        p = z.size
    cutoff = norm.isf(alpha / (2.0 * p))
    with np.errstate(invalid="ignore"):
        return np.abs(z) > cutoff


def bonferroni_cutoff(alpha, p):
    return float(norm.isf(alpha / (2.0 * p)))


# ---- assembled gene-level testing ---------------------------------------


def run_inference(dataset, fit, cfg=None):
    """Debiased tests for every gene given a completed three-stage fit."""
    cfg = cfg or DebiasConfig()
    fam = fit.family
    X = dataset.X
    Y = dataset.Y
    n = X.shape[0]
    eta = build_theta(X, fit.B_hat, fit.Z_hat, fit.Gamma_hat)
    T_tilde, Omega = debias_matrices(Y, eta, fam, fit.Gamma_hat, cfg.curvature_floor)
    b_hat = fit.B_hat[:, cfg.coef_index - 1]
    scree = None
    if isinstance(cfg.lambda_n, str) and cfg.lambda_n == "auto":
        lambda_n, _, scree = select_lambda_n(X, b_hat, T_tilde, Omega, fam, cfg)
    else:
        lambda_n = float(cfg.lambda_n)
    b_de, sigma, u_hat, warn = debias_all_genes(
        X, b_hat, T_tilde, Omega, lambda_n, cfg.coef_index,
        per_gene_u=cfg.per_gene_u, tau_n=cfg.tau_n,
    )
    z, pvals = z_statistics(b_de, sigma, n)
    qvals = bh_adjust(pvals)
    with np.errstate(invalid="ignore"):
        reject_alpha = pvals < cfg.alpha
        reject_fdr = qvals < cfg.fdr_cut
    return InferenceResult(
        gene_names=list(dataset.gene_names),
        coef_index=cfg.coef_index,
        b_hat=b_hat,
        b_debiased=b_de,
        sigma_hat=sigma,
        z=z,
        pvalue=pvals,
        qvalue=qvals,
        lambda_n=lambda_n,
        u_hat=u_hat,
        reject_alpha=reject_alpha,
        reject_fdr=reject_fdr,
        alpha=cfg.alpha,
        fdr_cut=cfg.fdr_cut,
        warn_flags=warn,
        lambda_n_trace=scree,
    )


def run_split_inference(dataset, r, fam_spec, cfg=None, opts=None, lam="auto",
                        rng=None):
    """Sample-splitting inference: estimate on one fold, debias on the other.

    cfg.split_ratio is the fraction of samples reserved for the
    inference fold D1; the remaining samples D2 estimate (B, Gamma).
    The latent factors of D1 are then refit per sample with those
    estimates frozen (all genes kept by default; cfg.leave_one_out
    drops the tested gene from its own refit).  A ratio >= 1 degenerates
    to the no-splitting pipeline.
    """
    from . import pipeline  # deferred: pipeline builds on this module

    cfg = cfg or DebiasConfig()
    n = dataset.n
    if cfg.split == "none" or cfg.split_ratio >= 1.0:
        fit = pipeline.fit_gcate(dataset, r, fam_spec, opts=opts, lam=lam)
        return run_inference(dataset, fit, cfg)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n1 = int(np.floor(cfg.split_ratio * n))
    if n1 < 2 or n - n1 < 2:
        raise ValueError("split leaves too few samples in one fold")
    idx1, idx2 = perm[:n1], perm[n1:]
    from .model import GlmDataset

    data2 = GlmDataset(dataset.Y[idx2], dataset.X[idx2],
                       gene_names=list(dataset.gene_names))
    fit2 = pipeline.fit_gcate(data2, r, fam_spec, opts=opts, lam=lam)
    fam = fit2.family
    X1 = dataset.X[idx1]
    Y1 = dataset.Y[idx1]

    def infer_on(Z1):
        eta1 = build_theta(X1, fit2.B_hat, Z1, fit2.Gamma_hat)
        return debias_matrices(Y1, eta1, fam, fit2.Gamma_hat, cfg.curvature_floor)

    b_hat = fit2.B_hat[:, cfg.coef_index - 1]
    if cfg.leave_one_out:
        p = dataset.p
        rows = []
        for j in range(p):
            keep = np.arange(p) != j
            fam_j = fam.with_aux(np.asarray(fam.aux)[keep]) \
                if np.ndim(fam.aux) == 1 else fam
            Zj = refit_latent_rows(Y1[:, keep], X1, fit2.B_hat[keep],
                                   fit2.Gamma_hat[keep], fam_j)
            rows.append(Zj)
        # per-gene Z estimates: evaluate each gene with its own refit
        T_cols, O_cols = [], []
        for j, Zj in enumerate(rows):
            T_j, O_j = infer_on(Zj)
            T_cols.append(T_j[:, j])
            O_cols.append(O_j[:, j])
        T_tilde = np.column_stack(T_cols)
        Omega = np.column_stack(O_cols)
    else:
        Z1 = refit_latent_rows(Y1, X1, fit2.B_hat, fit2.Gamma_hat, fam)
        T_tilde, Omega = infer_on(Z1)
    scree = None
    if isinstance(cfg.lambda_n, str) and cfg.lambda_n == "auto":
        lambda_n, _, scree = select_lambda_n(X1, b_hat, T_tilde, Omega, fam, cfg)
    else:
        lambda_n = float(cfg.lambda_n)
    b_de, sigma, u_hat, warn = debias_all_genes(
        X1, b_hat, T_tilde, Omega, lambda_n, cfg.coef_index,
        per_gene_u=cfg.per_gene_u, tau_n=cfg.tau_n,
    )
    z, pvals = z_statistics(b_de, sigma, n1)
    qvals = bh_adjust(pvals)
    with np.errstate(invalid="ignore"):
        reject_alpha = pvals < cfg.alpha
        reject_fdr = qvals < cfg.fdr_cut
    return InferenceResult(
        gene_names=list(dataset.gene_names),
        coef_index=cfg.coef_index,
        b_hat=b_hat,
        b_debiased=b_de,
        sigma_hat=sigma,
        z=z,
        pvalue=pvals,
        qvalue=qvals,
        lambda_n=lambda_n,
        u_hat=u_hat,
        reject_alpha=reject_alpha,
        reject_fdr=reject_fdr,
        alpha=cfg.alpha,
        fdr_cut=cfg.fdr_cut,
        warn_flags=warn,
        lambda_n_trace=scree,
    )
