"""Data containers and likelihood evaluation for the confounded GLM.

The model couples an observed design X (n x d) and unobserved factors
Z (n x r) to a response matrix Y (n x p) through natural parameters

    Theta = X B' + Z Gamma',

with each y_ij drawn from a one-parameter exponential family at
theta_ij.  The averaged negative log-likelihood

    L(Theta) = -(1/n) sum_ij (y_ij theta_ij - A(theta_ij))

drops the h(y) base-measure terms; `deviance` keeps them so that model
comparisons across ranks remain meaningful.
"""

from dataclasses import dataclass, field

import numpy as np

from .expfam import ExponentialFamily


@dataclass
class GlmDataset:
    """Responses, design, and optional oracle confounders."""

    Y: np.ndarray
    X: np.ndarray
    gene_names: list = None
    oracle_Z: np.ndarray = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        if self.Y.ndim != 2 or self.X.ndim != 2:
            raise ValueError("Y and X must be 2-d arrays")
        n, p = self.Y.shape
        if n < 2 or p < 1:
            raise ValueError(f"need n >= 2 and p >= 1, got {self.Y.shape}")
        if self.X.shape[0] != n:
            raise ValueError(
                f"X has {self.X.shape[0]} rows but Y has {n} samples"
            )
        if self.X.shape[1] < 1:
            raise ValueError("X needs at least one column")
        if np.linalg.matrix_rank(self.X) < self.X.shape[1]:
            raise ValueError("X does not have full column rank")
        if self.gene_names is None:
            width = max(4, len(str(p)))
            self.gene_names = [f"gene_{j + 1:0{width}d}" for j in range(p)]
        if len(self.gene_names) != p:
            raise ValueError("gene_names length must match the gene count")
        if self.oracle_Z is not None:
            self.oracle_Z = np.asarray(self.oracle_Z, dtype=float)
            if self.oracle_Z.shape[0] != n:
                raise ValueError("oracle_Z must have one row per sample")

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def p(self):
        return self.Y.shape[1]

    @property
    def d(self):
        return self.X.shape[1]


@dataclass
class FactorModelFit:
    """Everything estimated by the three-stage fit.

    F_hat holds the marginal effects, (W0_hat, Gamma0_hat) the
    uncorrelated latent components from stage 1, (W_hat, Gamma_hat)
    their normalized stage-2 factorization, and (B_hat, Z_hat) the
    direct effects and latent factors from stage 3.  Theta_hat stores
    natural parameters (for the negbin log link these are the mapped
    theta(xi), not the linear predictor).
    """

    family: ExponentialFamily
    r: int
    F_hat: np.ndarray
    W0_hat: np.ndarray
    Gamma0_hat: np.ndarray
    W_hat: np.ndarray = None
    Gamma_hat: np.ndarray = None
    B_hat: np.ndarray = None
    Z_hat: np.ndarray = None
    Theta_hat: np.ndarray = None
    lam: float = 0.0
    diagnostics: dict = field(default_factory=dict)


@dataclass
class InferenceResult:
    """Per-gene debiased tests for one coefficient of X."""

    gene_names: list
    coef_index: int  # 1-based column of X being tested
    b_hat: np.ndarray
    b_debiased: np.ndarray
    sigma_hat: np.ndarray
    z: np.ndarray
    pvalue: np.ndarray
    qvalue: np.ndarray
    lambda_n: float
    u_hat: np.ndarray
    reject_alpha: np.ndarray = None
    reject_fdr: np.ndarray = None
    alpha: float = 0.05
    fdr_cut: float = 0.2
    warn_flags: np.ndarray = None
    lambda_n_trace: dict = None


def build_theta(X, B, Z=None, Gamma=None):
    """Linear predictor X B' + Z Gamma' with shape validation."""
    X = np.asarray(X, dtype=float)
    B = np.asarray(B, dtype=float)
    if X.ndim != 2 or B.ndim != 2 or X.shape[1] != B.shape[1]:
        raise ValueError(
            f"X {X.shape} and B {B.shape} disagree on the covariate dimension"
        )
    theta = X @ B.T
    if Z is not None or Gamma is not None:
        if Z is None or Gamma is None:
            raise ValueError("Z and Gamma must be supplied together")
        Z = np.asarray(Z, dtype=float)
        Gamma = np.asarray(Gamma, dtype=float)
        if Z.ndim != 2 or Gamma.ndim != 2 or Z.shape[1] != Gamma.shape[1]:
            raise ValueError(
                f"Z {Z.shape} and Gamma {Gamma.shape} disagree on the factor dimension"
            )
        if Z.shape[0] != X.shape[0]:
            raise ValueError("Z must have one row per sample")
        if Gamma.shape[0] != B.shape[0]:
            raise ValueError("Gamma must have one row per gene")
        if Z.shape[1] > 0:
            theta = theta + Z @ Gamma.T
    return theta


def neg_log_likelihood(Y, theta, fam):
    """Averaged negative log-likelihood, excluding h(y) terms.

    theta is interpreted as natural parameters under canonical links and
    as the linear predictor under the negbin log link.
    """
    Y = np.asarray(Y, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if Y.shape != theta.shape:
        raise ValueError(f"Y {Y.shape} and theta {theta.shape} differ in shape")
    if fam.link != "log":
        fam.check_domain(theta)
    n = Y.shape[0] if Y.ndim == 2 else 1
    cells = fam.nll_cells(Y, theta)
    return float(np.sum(cells)) / n


def deviance(Y, theta, fam):
    """-2 sum log p(y | theta), h(y) included."""
    Y = np.asarray(Y, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if Y.shape != theta.shape:
        raise ValueError(f"Y {Y.shape} and theta {theta.shape} differ in shape")
    if fam.link != "log":
        fam.check_domain(theta)
    cells = fam.nll_cells(Y, theta)
    return float(2.0 * (np.sum(cells) - np.sum(fam.log_base_measure(Y))))


def loss_gradients(Y, X, B, Z, Gamma, fam):
    """Analytic gradients of L at (B, Z, Gamma).

    Valid for canonical links and for the negbin log link (the chain
    rule factor dtheta/deta is folded in).  Returns (gB, gZ, gGamma).
    """
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    eta = build_theta(X, B, Z, Gamma)
    # dL/deta_ij = (1/n) (A'(theta) - y) dtheta/deta
    G = (fam.mean_from_eta(eta) - Y) * fam.dtheta_deta(eta) / n
    gB = G.T @ X
    gZ = G @ Gamma
    gGamma = G.T @ Z
    return gB, gZ, gGamma
