"""One-parameter exponential families in canonical form, plus the
negative-binomial log link.

Each family is characterized by its log-partition function A and the
derivatives A' (mean) and A'' (variance), all evaluated at the natural
parameter theta:

    kind        A(theta)                mean                variance
    gaussian    theta^2 / 2             theta               1
    bernoulli   log(1 + e^theta)        sigmoid(theta)      mu (1 - mu)
    binomial    m log(1 + e^theta)      m sigmoid(theta)    mu (1 - mu/m)
    poisson     e^theta                 e^theta             e^theta
    negbin      -phi log(1 - e^theta)   phi e^th/(1-e^th)   phi e^th/(1-e^th)^2

The negative binomial requires theta < 0.  Because a linear predictor is
unbounded, the log link is usually preferred for it: the linear predictor
xi parameterizes the mean as mu = e^xi, and theta = log(e^xi/(phi+e^xi)).
Helpers for that reparameterization (theta(xi), dtheta/dxi, and the
expected-Hessian weight phi e^xi/(phi+e^xi)) live here as well.

All evaluators broadcast over numpy arrays; `aux` may be a per-column
vector (per-gene dispersions) that broadcasts against (n, p) matrices.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"
BINOMIAL = "binomial"
POISSON = "poisson"
NEGBIN = "negbin"

KINDS = (GAUSSIAN, BERNOULLI, BINOMIAL, POISSON, NEGBIN)

CANONICAL = "canonical"
LOG = "log"

# Clipping range for the NB1 dispersion alpha = 1/phi.
ALPHA_MIN = 1e-2
ALPHA_MAX = 1e2

# Margin keeping NB canonical parameters strictly negative.
NEGBIN_THETA_MARGIN = 1e-6

# Default half-width of the natural-parameter box used by the optimizer.
# Wide enough that it only guards against numerical overflow; the line
# search, not the box, is what keeps iterates sensible.
DEFAULT_BOUND_C = 30.0


class DomainError(ValueError):
    """Natural parameter outside the family's domain."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass
class NaturalDomain:
    """Bounded natural-parameter region used during optimization."""

    lower: float
    upper: float
    kind: str = "box"  # "box" or "negative_half_line"

    def contains(self, theta):
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))


@dataclass
class ExponentialFamily:
    """Family kind plus auxiliary parameter and link choice.

    aux is sigma^2 for gaussian, the trial count m for binomial, and the
    failure count phi for negbin (scalar or per-gene vector); it is
    unused otherwise.  Only negbin admits the log link.
    """

    kind: str
    aux: object = None
    link: str = CANONICAL

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}")
        if self.link not in (CANONICAL, LOG):
            raise ValueError(f"unknown link {self.link!r}")
        if self.link == LOG and self.kind != NEGBIN:
            raise ValueError("log link is only supported for the negbin family")
        if self.aux is None:
            if self.kind == GAUSSIAN:
                self.aux = 1.0
            elif self.kind == BINOMIAL:
                self.aux = 1
            elif self.kind == NEGBIN:
                self.aux = 1.0
        if self.kind == GAUSSIAN and not np.all(np.asarray(self.aux) > 0):
            raise ValueError("gaussian variance must be positive")
        if self.kind == BINOMIAL:
            m = np.asarray(self.aux)
            if not np.all((m > 0) & (m == np.round(m))):
                raise ValueError("binomial trial count must be a positive integer")
        if self.kind == NEGBIN and not np.all(np.asarray(self.aux) > 0):
            raise ValueError("negbin dispersion phi must be positive")

    # aux broadcast against (n, p) or (p,) arrays of natural parameters
    def _aux_arr(self, theta):
        a = np.asarray(self.aux, dtype=float)
        th = np.asarray(theta)
        if a.ndim == 1 and th.ndim == 2:
            return a[None, :]
        return a

    def with_aux(self, aux):
        return ExponentialFamily(self.kind, aux, self.link)

    def subset_genes(self, idx):
        """Family restricted to a gene subset (slices per-gene aux)."""
        if np.ndim(self.aux) == 1:
            return ExponentialFamily(self.kind, np.asarray(self.aux)[idx], self.link)
        return self

    def natural_domain(self, bound_c=DEFAULT_BOUND_C):
        if self.kind == NEGBIN and self.link == CANONICAL:
            return NaturalDomain(-bound_c, -1.0 / bound_c, "negative_half_line")
        return NaturalDomain(-bound_c, bound_c, "box")

    def validate_response(self, Y):
        Y = np.asarray(Y)
        if not np.all(np.isfinite(Y)):
            raise ValueError("response contains non-finite entries")
        if self.kind in (POISSON, NEGBIN, BINOMIAL, BERNOULLI):
            if np.any(Y < 0) or np.any(Y != np.round(Y)):
                raise ValueError(f"{self.kind} responses must be nonnegative integers")
        if self.kind == BERNOULLI and np.any(Y > 1):
            raise ValueError("bernoulli responses must be 0 or 1")
        if self.kind == BINOMIAL:
            m = self._aux_arr(Y)
            if np.any(Y > m):
                raise ValueError("binomial responses exceed the trial count")

    # ---- canonical-parameter evaluators -------------------------------

    def check_domain(self, theta):
        """Raise DomainError if theta leaves the family's open domain."""
        if self.kind == NEGBIN:
            theta = np.asarray(theta)
            bad = theta >= 0
            if np.any(bad):
                idx = np.argwhere(bad)
                first = tuple(idx[0]) if idx.ndim > 1 else int(idx[0])
                raise DomainError(
                    f"negbin natural parameter must be < 0; offending index {first}",
                    index=first,
                )

    def log_partition(self, theta):
        self.check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        if self.kind == GAUSSIAN:
            return theta**2 / 2.0
        if self.kind == BERNOULLI:
            return np.logaddexp(0.0, theta)
        if self.kind == BINOMIAL:
            return self._aux_arr(theta) * np.logaddexp(0.0, theta)
        if self.kind == POISSON:
            return np.exp(theta)
        # negbin: -phi log(1 - e^theta); expm1 keeps theta near 0- accurate
        return -self._aux_arr(theta) * np.log(-np.expm1(theta))

    def mean(self, theta):
        self.check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        if self.kind == GAUSSIAN:
            return theta + 0.0
        if self.kind == BERNOULLI:
            return expit(theta)
        if self.kind == BINOMIAL:
            return self._aux_arr(theta) * expit(theta)
        if self.kind == POISSON:
            return np.exp(theta)
        return self._aux_arr(theta) * np.exp(theta) / (-np.expm1(theta))

    def variance(self, theta):
        self.check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        if self.kind == GAUSSIAN:
            return np.ones_like(theta)
        if self.kind == BERNOULLI:
            return expit(theta) * expit(-theta)
        if self.kind == BINOMIAL:
            return self._aux_arr(theta) * expit(theta) * expit(-theta)
        if self.kind == POISSON:
            return np.exp(theta)
        return self._aux_arr(theta) * np.exp(theta) / np.expm1(theta) ** 2

    def log_base_measure(self, Y):
        """log h(y), the density terms that do not involve theta."""
        Y = np.asarray(Y, dtype=float)
        if self.kind == GAUSSIAN:
            return -(Y**2) / 2.0 - 0.5 * np.log(2.0 * np.pi)
        if self.kind == BERNOULLI:
            return np.zeros_like(Y)
        if self.kind == BINOMIAL:
            m = self._aux_arr(Y)
            return gammaln(m + 1) - gammaln(Y + 1) - gammaln(m - Y + 1)
        if self.kind == POISSON:
            return -gammaln(Y + 1)
        phi = self._aux_arr(Y)
        return gammaln(Y + phi) - gammaln(phi) - gammaln(Y + 1)

    # ---- linear-predictor (eta) evaluators -----------------------------
    #
    # The optimizer and the debiasing step work on the linear predictor
    # eta = x'b + z'gamma.  Under canonical links eta IS the natural
    # parameter (negbin canonical additionally clamps eta below the
    # domain boundary); under the negbin log link eta is xi with
    # theta = xi - log(phi + e^xi).

    def natural_param(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.link == LOG:
            return nb_theta_from_xi(eta, self.__aux_for(eta))
        if self.kind == NEGBIN:
            return np.minimum(eta, -NEGBIN_THETA_MARGIN)
        return eta

    def __aux_for(self, eta):
        return self._aux_arr(eta)

    def mean_from_eta(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.link == LOG:
            return np.exp(eta)
        return self.mean(self.natural_param(eta))

    def weight_from_eta(self, eta):
        """Expected curvature of the cell loss in eta.

        Canonical links: A''(theta).  Negbin log link:
        phi e^xi / (phi + e^xi), the Fisher-scoring weight.
        """
        eta = np.asarray(eta, dtype=float)
        if self.link == LOG:
            phi = self.__aux_for(eta)
            return phi * expit(eta - np.log(phi))
        return self.variance(self.natural_param(eta))

    def dtheta_deta(self, eta):
        """Derivative of the natural parameter in the linear predictor."""
        eta = np.asarray(eta, dtype=float)
        if self.link == LOG:
            phi = self.__aux_for(eta)
            return expit(np.log(phi) - eta)
        if self.kind == NEGBIN:
            # zero beyond the clamp: the clamped loss is flat there
            return (eta < -NEGBIN_THETA_MARGIN).astype(float)
        return np.ones_like(eta)

    def nll_cells(self, Y, eta):
        """Per-cell negative log-likelihood A(theta) - y theta (no h(y))."""
        theta = self.natural_param(eta)
        return self.log_partition(theta) - np.asarray(Y) * theta


def family(kind, aux=None, link=None):
    """Build an ExponentialFamily from loosely-typed CLI-style values."""
    kind = str(kind).lower()
    if link is None:
        link = LOG if kind == NEGBIN else CANONICAL
    return ExponentialFamily(kind, aux, str(link).lower())


# ---- spec'd module-level operations ------------------------------------


def log_partition(fam, theta):
    return fam.log_partition(theta)


def mean(fam, theta):
    return fam.mean(theta)


def variance(fam, theta):
    return fam.variance(theta)


def nb_theta_from_xi(xi, phi):
    """Natural parameter of a negbin cell from its log-link predictor.

    theta = log(e^xi / (phi + e^xi)) = -log(1 + phi e^{-xi}), evaluated
    as a negated softplus of (log phi - xi) so it stays accurate (and
    strictly negative) for every finite xi.
    """
    xi = np.asarray(xi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(phi <= 0):
        raise ValueError("phi must be positive")
    s = np.log(phi) - xi
    theta = -(np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s))))
    # guard against underflow to 0.0 at extreme xi
    tiny = np.finfo(float).tiny
    return np.minimum(theta, -tiny)


def nb_log_link_weight(xi, phi):
    """Expected-Hessian weight phi e^xi / (phi + e^xi) of the NB log link."""
    xi = np.asarray(xi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(phi <= 0):
        raise ValueError("phi must be positive")
    return phi * expit(xi - np.log(phi))


def nb_dtheta_dxi(xi, phi):
    """dtheta/dxi = phi / (phi + e^xi), used in the debias chain rule."""
    xi = np.asarray(xi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(phi <= 0):
        raise ValueError("phi must be positive")
    return expit(np.log(phi) - xi)


def estimate_dispersion(y_col, mu_hat):
    """Method-of-moments NB dispersion from one gene's counts.

    Solves (1/n) sum (y - mu)^2 = mu (1 + alpha mu) for alpha, clips
    alpha to [1e-2, 1e2], and returns phi = 1/alpha.
    """
    y = np.asarray(y_col, dtype=float)
    if y.size < 2:
        raise ValueError("need at least two observations")
    mu_hat = float(mu_hat)
    if mu_hat <= 0:
        raise ValueError("mu_hat must be positive")
    second_moment = np.mean((y - mu_hat) ** 2)
    alpha = (second_moment - mu_hat) / mu_hat**2
    alpha = float(np.clip(alpha, ALPHA_MIN, ALPHA_MAX))
    return 1.0 / alpha


def estimate_dispersions(Y, mu_hats):
    """Vectorized per-gene dispersion estimates; returns a phi vector."""
    Y = np.asarray(Y, dtype=float)
    mu = np.asarray(mu_hats, dtype=float)
    if np.any(mu <= 0):
        raise ValueError("fitted means must be positive")
    second_moment = np.mean((Y - mu[None, :]) ** 2, axis=0)
    alpha = (second_moment - mu) / mu**2
    alpha = np.clip(alpha, ALPHA_MIN, ALPHA_MAX)
    return 1.0 / alpha
