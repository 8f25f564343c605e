"""Rank selection by a joint-likelihood information criterion.

The criterion for a rank-r fit is the per-cell deviance plus a
complexity penalty counting both the observed and the latent
coordinates:

    JIC(r) = deviance(Y, Theta_r) / (n p)
             + c_jic (d + r) log(n ^ p) / (n ^ p),

where n ^ p is min(n, p).  The per-cell normalization puts the two
terms on the same scale, so the scree of deviance decrements against
penalty increments is directly comparable and the argmin is a usable
estimate of the number of factors.  Ties break toward the smaller rank.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import deviance
from .optimize import OptimOptions, solve_stage1


@dataclass
class JicTrace:
    r_values: list = field(default_factory=list)
    deviance: list = field(default_factory=list)  # per-cell normalized
    penalty: list = field(default_factory=list)
    jic: list = field(default_factory=list)
    selected_r: int = None
    c_jic: float = 1.0

    def increments(self):
        """Scree quantities: decrement of deviance and increment of
        penalty from each rank to the next."""
        dev = np.asarray(self.deviance)
        pen = np.asarray(self.penalty)
        return {
            "r_values": list(self.r_values[1:]),
            "deviance_decrement": list(dev[:-1] - dev[1:]),
            "penalty_increment": list(pen[1:] - pen[:-1]),
        }


def jic_penalty(n, p, d, r, c_jic=1.0):
    m = min(n, p)
    return c_jic * (d + r) * np.log(m) / m


def jic(theta_hat, Y, fam, n, p, d, r, c_jic=1.0):
    """JIC value of a converged rank-r fit (per-cell scale)."""
    return deviance(Y, theta_hat, fam) / (n * p) + jic_penalty(n, p, d, r, c_jic)


def select_rank(Y, X, fam, r_min=1, r_max=10, c_jic=1.0, opts=None):
    """Fit stage 1 over a rank grid and pick the JIC argmin."""
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = Y.shape
    d = X.shape[1]
    if not (0 <= r_min <= r_max <= min(n, p)):
        raise ValueError(
            f"need 0 <= r_min <= r_max <= min(n, p); got [{r_min}, {r_max}]"
        )
    opts = opts or OptimOptions()
    trace = JicTrace(c_jic=c_jic)
    for r in range(r_min, r_max + 1):
        try:
            _, _, _, eta, _ = solve_stage1(Y, X, r, fam, opts)
            theta = fam.natural_param(np.clip(eta, -opts.bound_c, opts.bound_c))
        except Exception as exc:  # noqa: BLE001 - per-rank failures are recorded
            warnings.warn(f"rank {r} fit failed and was skipped: {exc}")
            continue
        dev = deviance(Y, theta, fam) / (n * p)
        pen = jic_penalty(n, p, d, r, c_jic)
        trace.r_values.append(r)
        trace.deviance.append(float(dev))
        trace.penalty.append(float(pen))
        trace.jic.append(float(dev + pen))
    if not trace.r_values:
        raise RuntimeError("every rank in the grid failed to fit")
    best = int(np.argmin(trace.jic))  # argmin takes the first = smallest r on ties
    trace.selected_r = trace.r_values[best]
    return trace
