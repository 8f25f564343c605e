"""Alternating maximization for the factor-adjusted GLM.

Both estimation stages minimize the averaged negative log-likelihood of
a low-rank natural-parameter matrix Theta = L R' by alternating one
projected-gradient step on the free row blocks with one on the free
column blocks.  Stage 1 fits the marginal effects and the uncorrelated
latent components

    min L(X F' + W Gamma0')   s.t.  P_X W = 0,

and stage 3 fits the direct effects against the frozen loading basis

    min L(X B' + Z Gamma') + lambda ||B||_1,1   s.t.  P_Gamma B = 0.

Subspace constraints are kept exact at every iteration: gradients are
projected onto the constraint's tangent space, a single shared Armijo
step is taken per half-update, and the explicit projection is reapplied
afterwards to remove floating-point drift.  The l1 penalty enters
through soft-thresholding of the B coordinates, applied before the
orthogonality projection because the latter is the binding feasibility
condition.  Line-search candidates are evaluated on the box-clamped
objective, so iterates can never leave the natural-parameter region and
the recorded objective trace is non-increasing by construction.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .expfam import NEGBIN, NEGBIN_THETA_MARGIN, DEFAULT_BOUND_C, LOG

DEFAULT_C_PRIME_POISSON = 1e5
DEFAULT_C_PRIME_NEGBIN = 1e3


@dataclass
class OptimOptions:
    max_outer_iters: int = 200
    obj_tol: float = 1e-4
    patience: int = 20
    armijo_init_step: float = 0.1
    armijo_shrink: float = 0.5
    armijo_tol: float = 1e-4
    armijo_max_iters: int = 20
    grad_ball_radius: float = None  # resolved per family when None (2 C')
    lam: float = 0.0
    ridge_init: float = 1e-5
    bound_c: float = DEFAULT_BOUND_C
    # "fisher" rescales each block gradient by the expected block
    # Hessian before the line search; count models mix cell curvatures
    # spanning tens of orders of magnitude, where raw gradient steps
    # stall.  "gradient" is the plain projected-gradient rule.
    step_rule: str = "fisher"
    # inner backtracked steps per block half-update (the block update is
    # an argmax; a handful of damped Newton steps approximates it far
    # better than a single one)
    max_inner_iters: int = 5
    # trust region: no cell's natural parameter moves more than this per
    # accepted step.  Large damped-Newton moves through the flat tails
    # of count likelihoods would otherwise strand single cells at
    # extreme values that the tiny tail gradients can never pull back.
    eta_step_cap: float = 2.0

    def __post_init__(self):
        if self.obj_tol <= 0 or self.armijo_init_step <= 0 or self.armijo_tol <= 0:
            raise ValueError("tolerances and step sizes must be positive")
        if not (0 < self.armijo_shrink < 1):
            raise ValueError("armijo_shrink must lie in (0, 1)")
        if self.max_outer_iters < 1 or self.patience < 1 or self.armijo_max_iters < 1:
            raise ValueError("iteration counts must be positive")
        if self.step_rule not in ("fisher", "gradient"):
            raise ValueError("step_rule must be 'fisher' or 'gradient'")

    def init_step(self):
        return 1.0 if self.step_rule == "fisher" else self.armijo_init_step

    def resolve_radius(self, fam):
        if self.grad_ball_radius is not None:
            return self.grad_ball_radius
        c_prime = DEFAULT_C_PRIME_NEGBIN if fam.kind == NEGBIN else DEFAULT_C_PRIME_POISSON
        return 2.0 * c_prime


@dataclass
class AlternationConstraints:
    """Which coordinates move, and how they are kept feasible.

    The engine works on concatenated blocks L = [fixed | free] (rows)
    and R = [free | fixed] (columns).  row_projector / col_projector act
    on the free blocks; l1_cols marks the prox-thresholded columns of
    the free column block.
    """

    row_fixed_cols: int = 0
    col_free_cols: int = None  # None means every column of R is free
    row_projector: object = None
    col_projector: object = None
    l1_cols: int = 0  # leading columns of the free col block under the l1 prox


def _eta_box(fam, bound_c):
    if fam.link == LOG:
        return -bound_c, bound_c
    if fam.kind == NEGBIN:
        return -bound_c, -NEGBIN_THETA_MARGIN
    return -bound_c, bound_c


def _cells_sum(Y, eta, fam, box):
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.sum(fam.nll_cells(Y, np.clip(eta, box[0], box[1])))
    return total if np.isfinite(total) else np.inf


def _grad_cells(Y, eta, fam, box):
    eta_c = np.clip(eta, box[0], box[1])
    G = (fam.mean_from_eta(eta_c) - Y) * fam.dtheta_deta(eta_c)
    # the clamped objective is flat outside the box
    inside = (eta > box[0]) & (eta < box[1])
    return G * inside


def _weight_cells(Y, eta, fam, box):
    eta_c = np.clip(eta, box[0], box[1])
    with np.errstate(over="ignore", invalid="ignore"):
        W = fam.weight_from_eta(eta_c)
    return np.nan_to_num(W, nan=0.0, posinf=1e300)


def _fisher_directions(G, H, ridge_rel=1e-9):
    """Batched solve of H d = g with a relative ridge; returns descent
    directions -d and the per-unit slopes g'd."""
    k = H.shape[-1]
    scale = np.maximum(np.trace(H, axis1=-2, axis2=-1) / k, 1e-300)
    Hr = H + (ridge_rel * scale[..., None, None] + 1e-300) * np.eye(k)
    try:
        d = np.linalg.solve(Hr, G[..., None])[..., 0]
    except np.linalg.LinAlgError:
        d = np.linalg.solve(Hr + np.eye(k) * scale[..., None, None] * 1e-6,
                            G[..., None])[..., 0]
    slope = np.sum(G * d, axis=-1)
    return -d, slope


def _clip_row_norms(G, radius):
    norms = np.sqrt(np.sum(G * G, axis=1, keepdims=True))
    scale = np.where(norms > radius, radius / np.maximum(norms, 1e-300), 1.0)
    return G * scale


def _soft_threshold(M, t):
    return np.sign(M) * np.maximum(np.abs(M) - t, 0.0)


def col_space_basis(M, rtol=1e-12):
    """Orthonormal basis of col(M); empty matrix when M is (near) zero."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros((M.shape[0], 0))
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    keep = s > rtol * max(s[0], 1e-300)
    return U[:, keep]


def make_complement_projector(M):
    """Returns f(A) = P_M^perp A acting on columns of A."""
    Q = col_space_basis(M)

    def project(A):
        if Q.shape[1] == 0:
            return A
        return A - Q @ (Q.T @ A)

    return project


def _penalty(R, cons, lam):
    if lam <= 0 or cons.l1_cols <= 0:
        return 0.0
    return lam * float(np.sum(np.abs(R[:, : cons.l1_cols])))


def _row_objectives(Y, eta, fam, box):
    with np.errstate(over="ignore", invalid="ignore"):
        vals = np.sum(fam.nll_cells(Y, np.clip(eta, box[0], box[1])), axis=1)
    return np.where(np.isfinite(vals), vals, np.inf)


def _col_objectives(Y, eta, fam, box):
    with np.errstate(over="ignore", invalid="ignore"):
        vals = np.sum(fam.nll_cells(Y, np.clip(eta, box[0], box[1])), axis=0)
    return np.where(np.isfinite(vals), vals, np.inf)


def _row_step(Y, L, R, fam, cons, opts, radius, box, warm):
    """One Armijo-backtracked step per free row block.

    Each row block takes a descent step (Fisher-rescaled or plain
    gradient) with its own backtracked step size, vectorized over the
    rows still searching and warm-started from twice the last accepted
    step.  When a subspace projector couples the rows it is applied
    after the update, and a global halving guard keeps the total
    objective from increasing.
    """
    n, p = Y.shape
    k = L.shape[1]
    free = slice(cons.row_fixed_cols, k)
    if free.start >= k:
        return L, False
    Rf = R[:, free]
    eta = L @ R.T
    Gc = _grad_cells(Y, eta, fam, box)
    G = (Gc @ Rf) / p
    if cons.row_projector is not None:
        G = cons.row_projector(G)
    if opts.step_rule == "fisher":
        Wc = _weight_cells(Y, eta, fam, box)
        H = np.einsum("np,pk,pl->nkl", Wc, Rf, Rf) / p
        D, slope = _fisher_directions(G, H)
    else:
        D, slope = -G, np.sum(G * G, axis=1)
    D = _clip_row_norms(D, radius)
    if not np.all(np.isfinite(slope)) or not np.any(slope > 0):
        return L, False
    base = _row_objectives(Y, eta, fam, box)  # p times the row objective
    delta_eta = D @ Rf.T
    steps = np.zeros(n)
    s = warm.copy()
    if opts.eta_step_cap is not None:
        move = np.max(np.abs(delta_eta), axis=1)
        s = np.minimum(s, opts.eta_step_cap / np.maximum(move, 1e-300))
    active = slope > 0
    for _ in range(opts.armijo_max_iters):
        idx = np.where(active)[0]
        if idx.size == 0:
            break
        trial = _row_objectives(
            Y[idx], eta[idx] + s[idx, None] * delta_eta[idx], fam, box
        )
        # Armijo on the (1/p)-scaled row objective
        ok = trial <= base[idx] - opts.armijo_tol * s[idx] * slope[idx] * p
        accepted = idx[ok]
        steps[accepted] = s[accepted]
        active[accepted] = False
        rest = idx[~ok]
        s[rest] *= opts.armijo_shrink
    init = opts.init_step()
    warm[:] = np.where(steps > 0, np.minimum(2.0 * steps, init), init)
    if not np.any(steps > 0):
        return L, False
    Lnew = L.copy()
    Lnew[:, free] = L[:, free] + steps[:, None] * D
    if cons.row_projector is None:
        return Lnew, True
    # coupling projection may perturb the per-row decrease; halve all
    # steps until the total objective is no worse than the base
    total_base = float(np.sum(base))
    for _ in range(40):
        Lnew[:, free] = cons.row_projector(L[:, free] + steps[:, None] * D)
        total = _cells_sum(Y, Lnew @ R.T, fam, box)
        if total <= total_base + 1e-12 * max(1.0, abs(total_base)):
            return Lnew, True
        steps *= 0.5
        if np.max(steps) < 1e-30:
            break
    return L, False


def _col_candidate(Rfree, D, steps, cons, lam, idx=None):
    """Proximal step along the descent direction D with per-gene steps."""
    if idx is None:
        idx = slice(None)
    cand = Rfree[idx] + steps[idx, None] * D[idx]
    if lam > 0 and cons.l1_cols > 0:
        cand[:, : cons.l1_cols] = _soft_threshold(
            cand[:, : cons.l1_cols], steps[idx, None] * lam
        )
    return cand


def _col_step(Y, L, R, fam, cons, opts, radius, box, lam, warm):
    """One backtracked step per free column (gene) block.

    Without an l1 penalty each gene takes a Fisher-rescaled (or plain
    gradient) descent step.  With the penalty the update is a proximal
    gradient step whose initial step size is each gene's inverse
    curvature 1/lambda_max(H_j), so genes on wildly different count
    scales all move.  The orthogonality projection is applied after the
    per-gene updates with the same global halving guard as the row
    step.
    """
    n, p = Y.shape
    kfree = R.shape[1] if cons.col_free_cols is None else cons.col_free_cols
    if kfree <= 0:
        return R, False
    free = slice(0, kfree)
    eta = L @ R.T
    Gc = _grad_cells(Y, eta, fam, box)
    G = (Gc.T @ L[:, free]) / n
    if not np.all(np.isfinite(G)) or not np.any(G):
        return R, False
    Rfree = R[:, free]
    Lfree = L[:, free]
    use_prox = lam > 0 and cons.l1_cols > 0
    if opts.step_rule == "fisher" or use_prox:
        Wc = _weight_cells(Y, eta, fam, box)
        H = np.einsum("np,ni,nk->pik", Wc, Lfree, Lfree) / n

    def pen_per_gene(block):
        if not use_prox:
            return 0.0
        return lam * np.sum(np.abs(block[:, : cons.l1_cols]), axis=1)

    if use_prox:
        # ISTA-style: gradient direction, per-gene 1/L step scale
        evmax = np.linalg.eigvalsh(H)[:, -1]
        D = _clip_row_norms(-G, radius)
        s_init = 1.0 / np.maximum(evmax, 1e-12)
    elif opts.step_rule == "fisher":
        D, slope = _fisher_directions(G, H)
        D = _clip_row_norms(D, radius)
        s_init = np.minimum(warm, 1.0)
    else:
        D, slope = -G, np.sum(G * G, axis=1)
        D = _clip_row_norms(D, radius)
        s_init = warm.copy()

    base = _col_objectives(Y, eta, fam, box) / n + pen_per_gene(Rfree)
    steps = np.zeros(p)
    s = s_init.copy()
    if opts.eta_step_cap is not None:
        move = np.max(np.abs(Lfree @ D.T), axis=0)
        s = np.minimum(s, opts.eta_step_cap / np.maximum(move, 1e-300))
    active = np.ones(p, dtype=bool)
    for _ in range(opts.armijo_max_iters):
        idx = np.where(active)[0]
        if idx.size == 0:
            break
        if use_prox:
            cand = _col_candidate(Rfree, D, s, cons, lam, idx)
            diff = cand - Rfree[idx]
            decrease = np.sum(diff * diff, axis=1) / s[idx]
        else:
            diff = s[idx, None] * D[idx]
            cand = Rfree[idx] + diff
            decrease = s[idx] * slope[idx]
        eta_cand = eta[:, idx] + Lfree @ diff.T
        trial = _col_objectives(Y[:, idx], eta_cand, fam.subset_genes(idx), box) / n
        trial = trial + pen_per_gene(cand)
        ok = (trial <= base[idx] - opts.armijo_tol * decrease) & (decrease > 0)
        accepted = idx[ok]
        steps[accepted] = s[accepted]
        active[accepted] = False
        still = idx[~ok]
        s[still] *= opts.armijo_shrink
    if not use_prox:
        init = opts.init_step()
        warm[:] = np.where(steps > 0, np.minimum(2.0 * steps, init), init)
    if not np.any(steps > 0):
        return R, False

    def assemble(step_vec):
        if use_prox:
            return _col_candidate(Rfree, D, step_vec, cons, lam)
        return Rfree + step_vec[:, None] * D

    if cons.col_projector is None:
        # per-gene sufficient decrease already holds
        Rnew = R.copy()
        Rnew[:, free] = assemble(steps)
        return Rnew, True
    total_base = float(np.sum(base))
    for _ in range(40):
        cand = cons.col_projector(assemble(steps))
        eta_new = eta + Lfree @ (cand - Rfree).T
        total = float(np.sum(_col_objectives(Y, eta_new, fam, box))) / n \
            + float(np.sum(pen_per_gene(cand)))
        if total <= total_base + 1e-12 * max(1.0, abs(total_base)):
            Rnew = R.copy()
            Rnew[:, free] = cand
            return Rnew, True
        steps *= 0.5
        if np.max(steps) < 1e-30:
            break
    return R, False


def alternating_max(Y, L_init, R_init, fam, constraints=None, opts=None):
    """Alternating projected-gradient solver for min L(L R') [+ l1].

    Returns (L, R, diagnostics); diagnostics carries the objective trace
    (averaged likelihood plus penalty) recorded after each outer
    iteration, which is non-increasing by construction.
    """
    Y = np.asarray(Y, dtype=float)
    L = np.array(L_init, dtype=float, copy=True)
    R = np.array(R_init, dtype=float, copy=True)
    cons = constraints or AlternationConstraints()
    opts = opts or OptimOptions()
    lam = opts.lam
    n, p = Y.shape
    if L.shape[0] != n or R.shape[0] != p or L.shape[1] != R.shape[1]:
        raise ValueError(
            f"incompatible blocks: Y {Y.shape}, L {L.shape}, R {R.shape}"
        )
    radius = opts.resolve_radius(fam)
    box = _eta_box(fam, opts.bound_c)

    obj = _cells_sum(Y, L @ R.T, fam, box) / n + _penalty(R, cons, lam)
    if not np.isfinite(obj):
        raise ValueError("objective is non-finite at the initial iterate")
    trace = [obj]
    stall = 0
    aborted = False
    n_iters = 0
    row_warm = np.full(n, opts.init_step())
    col_warm = np.full(p, opts.init_step())
    for _ in range(opts.max_outer_iters):
        n_iters += 1
        row_moved = False
        for _ in range(opts.max_inner_iters):
            L, moved = _row_step(Y, L, R, fam, cons, opts, radius, box, row_warm)
            row_moved |= moved
            if not moved:
                break
        col_moved = False
        for _ in range(opts.max_inner_iters):
            R, moved = _col_step(Y, L, R, fam, cons, opts, radius, box, lam, col_warm)
            col_moved |= moved
            if not moved:
                break
        new_obj = _cells_sum(Y, L @ R.T, fam, box) / n + _penalty(R, cons, lam)
        if not np.isfinite(new_obj):
            aborted = True
            break
        trace.append(new_obj)
        if obj - new_obj > opts.obj_tol:
            stall = 0
        else:
            stall += 1
        obj = new_obj
        if stall >= opts.patience:
            break
        if not row_moved and not col_moved:
            # both line searches stalled; nothing further can change
            stall = opts.patience
            break
    diagnostics = {
        "objective_trace": trace,
        "n_iters": n_iters,
        "final_objective": trace[-1],
        "converged": stall >= opts.patience,
        "aborted": aborted,
    }
    return L, R, diagnostics


# ---- per-gene GLM (initialization and baselines) -----------------------


def fit_marginal_glm(X, Y, fam, ridge=1e-5, force_ridge=False, max_iters=100,
                     grad_tol=1e-10, return_info=False):
    """Per-gene Newton (Fisher scoring) fit of the d-dimensional GLM.

    All genes are updated in one batched iteration.  A ridge of level
    `ridge` is switched on per gene when its Hessian is ill-conditioned
    (condition number > 1e8) or a step fails; `force_ridge` applies it
    everywhere from the start.  Genes that still fail to converge are
    zeroed out with a warning.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, d = X.shape
    p = Y.shape[1]
    F = np.zeros((p, d))
    ridge_on = np.full(p, bool(force_ridge))
    eye = np.eye(d)
    converged = np.zeros(p, dtype=bool)
    # gradient tolerance relative to each gene's response scale
    xscale = np.max(np.abs(X))
    gene_scale = np.maximum(1.0, np.mean(np.abs(Y), axis=0) * xscale)
    gtol = grad_tol * gene_scale

    def cell_obj(eta):
        with np.errstate(over="ignore", invalid="ignore"):
            cells = fam.nll_cells(Y, eta)
        return np.where(np.isfinite(np.sum(cells, axis=0)), np.sum(cells, axis=0), np.inf) / n

    obj = cell_obj(X @ F.T) + 0.5 * ridge * ridge_on * np.sum(F * F, axis=1)
    for _ in range(max_iters):
        active = ~converged
        if not np.any(active):
            break
        eta = X @ F.T
        with np.errstate(over="ignore", invalid="ignore"):
            Wc = fam.weight_from_eta(eta)
            Gc = (fam.mean_from_eta(eta) - Y) * fam.dtheta_deta(eta)
        Wc = np.nan_to_num(Wc, nan=0.0, posinf=1e12)
        Gc = np.nan_to_num(Gc, nan=0.0, posinf=1e12, neginf=-1e12)
        grad = Gc.T @ X / n + ridge * ridge_on[:, None] * F
        H = np.einsum("np,ni,nk->pik", Wc, X, X) / n
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(H)
        newly_bad = active & (~np.isfinite(cond) | (cond > 1e8)) & ~ridge_on
        if np.any(newly_bad):
            ridge_on |= newly_bad
            grad[newly_bad] += ridge * F[newly_bad]
        H = H + ridge * ridge_on[:, None, None] * eye[None, :, :]
        try:
            step = np.linalg.solve(H, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            H = H + ridge * eye[None, :, :]
            ridge_on[:] = True
            step = np.linalg.solve(H, grad[..., None])[..., 0]
        gnorm = np.max(np.abs(grad), axis=1)
        converged |= gnorm < gtol
        active = ~converged
        if not np.any(active):
            break
        # backtracking keeps the per-gene objective from increasing
        t = np.where(active, 1.0, 0.0)
        for _ in range(30):
            cand = F - t[:, None] * step
            cand_obj = cell_obj(X @ cand.T) + 0.5 * ridge * ridge_on * np.sum(cand * cand, axis=1)
            worse = active & ~(cand_obj <= obj + 1e-12)
            if not np.any(worse):
                break
            t = np.where(worse, t / 2.0, t)
        moved = t > 0
        F = np.where(moved[:, None], F - t[:, None] * step, F)
        obj = np.where(moved, cand_obj, obj)

    failed = ~converged
    if np.any(failed):
        # a final gradient check: tiny steps may have converged silently
        eta = X @ F.T
        with np.errstate(over="ignore", invalid="ignore"):
            Gc = (fam.mean_from_eta(eta) - Y) * fam.dtheta_deta(eta)
        grad = np.nan_to_num(Gc, nan=np.inf).T @ X / n + ridge * ridge_on[:, None] * F
        failed = np.max(np.abs(grad), axis=1) > 1e-6 * gene_scale
    if np.any(failed):
        warnings.warn(
            f"marginal GLM failed to converge for {int(np.sum(failed))} genes; "
            "their coefficients are set to zero"
        )
        F[failed] = 0.0
    if not return_info:
        return F
    # observed-information covariance at the solution (no ridge term)
    eta = X @ F.T
    Wc = fam.weight_from_eta(eta)
    H = np.einsum("np,ni,nk->pik", Wc, X, X)
    cov = np.full_like(H, np.nan)
    ok = ~failed
    if np.any(ok):
        try:
            cov[ok] = np.linalg.inv(H[ok])
        except np.linalg.LinAlgError:
            for j in np.where(ok)[0]:
                try:
                    cov[j] = np.linalg.inv(H[j])
                except np.linalg.LinAlgError:
                    pass
    return F, cov, ~failed


def init_factors_svd(Y, X, r, fam=None):
    """SVD-based starting values for the stage-1 latent blocks.

    Count likelihoods (poisson, negbin) factor log(Y+1); other families
    factor Y directly.  W0 is projected off the column space of X, so
    P_X W0 = 0 by construction.
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = Y.shape
    if r > min(n, p):
        raise ValueError(f"rank {r} exceeds min(n, p) = {min(n, p)}")
    if r == 0:
        return np.zeros((n, 0)), np.zeros((p, 0))
    if fam is not None and fam.kind in ("poisson", NEGBIN):
        M = np.log1p(Y)
    else:
        M = Y
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    W0 = (U * np.sqrt(s))[:, :r]
    G0 = (Vt.T * np.sqrt(s))[:, :r]
    Qx = col_space_basis(X)
    W0 = W0 - Qx @ (Qx.T @ W0)
    return W0, G0


def solve_stage1(Y, X, r, fam, opts=None):
    """Marginal effects and uncorrelated latent components.

    Minimizes L(X F' + W Gamma') under P_X W = 0.  Returns
    (F_hat, W0_hat, Gamma0_hat, eta0_hat, diagnostics) where eta0_hat is
    the fitted linear-predictor matrix X F' + W0 Gamma0'.
    """
    opts = opts or OptimOptions()
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = Y.shape
    d = X.shape[1]
    F0 = fit_marginal_glm(X, Y, fam, ridge=opts.ridge_init)
    if r == 0:
        eta = X @ F0.T
        diag = {"objective_trace": [], "n_iters": 0, "converged": True,
                "aborted": False, "final_objective": _cells_sum(Y, eta, fam, _eta_box(fam, opts.bound_c)) / n}
        return F0, np.zeros((n, 0)), np.zeros((p, 0)), eta, diag
    W0, G0 = init_factors_svd(Y, X, r, fam)
    stage_opts = OptimOptions(**{**opts.__dict__, "lam": 0.0})
    cons = AlternationConstraints(
        row_fixed_cols=d,
        col_free_cols=None,
        row_projector=make_complement_projector(X),
    )
    L = np.hstack([X, W0])
    R = np.hstack([F0, G0])
    L, R, diag = alternating_max(Y, L, R, fam, cons, stage_opts)
    F_hat = R[:, :d]
    W0_hat = L[:, d:]
    Gamma0_hat = R[:, d:]
    eta0 = L @ R.T
    return F_hat, W0_hat, Gamma0_hat, eta0, diag


def solve_stage2_extract(W0_hat, Gamma0_hat):
    """Normalized factorization of the latent components.

    Writes W0 Gamma0' = sqrt(np) U S V' (condensed SVD) and returns
    W = sqrt(n) U S^(1/2), Gamma = sqrt(p) V S^(1/2), so that
    W Gamma' reproduces W0 Gamma0' and (1/n) W'W = (1/p) Gamma'Gamma = S.
    """
    W0 = np.asarray(W0_hat, dtype=float)
    G0 = np.asarray(Gamma0_hat, dtype=float)
    n = W0.shape[0]
    p = G0.shape[0]
    r = W0.shape[1]
    if r == 0:
        return np.zeros((n, 0)), np.zeros((p, 0))
    if not (np.any(W0) and np.any(G0)):
        warnings.warn("latent components are identically zero; rank reduced to 0")
        return np.zeros((n, 0)), np.zeros((p, 0))
    Qw, Rw = np.linalg.qr(W0)
    Qg, Rg = np.linalg.qr(G0)
    M = Rw @ Rg.T / np.sqrt(n * p)
    Um, s, Vmt = np.linalg.svd(M)
    keep = s > 1e-12 * s[0]
    r_eff = int(np.sum(keep))
    if r_eff < r:
        warnings.warn(
            f"latent components have effective rank {r_eff} < {r}; "
            "trailing factors dropped"
        )
    U = Qw @ Um[:, :r_eff]
    V = Qg @ Vmt.T[:, :r_eff]
    root = np.sqrt(s[:r_eff])
    W = np.sqrt(n) * U * root
    Gamma = np.sqrt(p) * V * root
    return W, Gamma


def solve_stage3(Y, X, Gamma_hat, lam, fam, opts=None, F_hat=None, W_hat=None):
    """Direct effects and latent factors against the frozen loadings.

    Minimizes L(X B' + Z Gamma') + lambda ||B||_1,1 subject to
    P_Gamma B = 0.  Initialization: B = P_Gamma^perp F_hat and Z chosen
    so that Z Gamma' reconstructs X F' P_Gamma + W Gamma' exactly, which
    makes the starting Theta coincide with the stage-1 fit.

    Returns (B_hat, Z_hat, eta_hat, diagnostics).
    """
    opts = opts or OptimOptions()
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    Gamma = np.asarray(Gamma_hat, dtype=float)
    n, p = Y.shape
    d = X.shape[1]
    r = Gamma.shape[1]
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if F_hat is None:
        F_hat = fit_marginal_glm(X, Y, fam, ridge=opts.ridge_init)
    project_off_gamma = make_complement_projector(Gamma)
    B0 = project_off_gamma(F_hat)
    if r == 0:
        Z0 = np.zeros((n, 0))
    else:
        # Z0 Gamma' = X F' P_Gamma + W Gamma' exactly, so the stage-3
        # starting Theta equals the stage-1 fit
        gram = Gamma.T @ Gamma
        coef = np.linalg.solve(gram, (F_hat.T @ Gamma).T).T  # d x r
        Z0 = X @ coef
        if W_hat is not None and W_hat.shape[1] == r:
            Z0 = Z0 + np.asarray(W_hat, dtype=float)
    stage_opts = OptimOptions(**{**opts.__dict__, "lam": lam})
    cons = AlternationConstraints(
        row_fixed_cols=d,
        col_free_cols=d,
        col_projector=project_off_gamma,
        l1_cols=d,
    )
    L = np.hstack([X, Z0])
    R = np.hstack([B0, Gamma])
    L, R, diag = alternating_max(Y, L, R, fam, cons, stage_opts)
    B_hat = R[:, :d]
    Z_hat = L[:, d:]
    eta = L @ R.T
    return B_hat, Z_hat, eta, diag


def default_lambda(n, p, fam):
    """Practical lasso level c1 sqrt(log p / n).

    c1 is 0.01 for negbin likelihoods and 0.02 otherwise.
    """
    c1 = 0.01 if fam.kind == NEGBIN else 0.02
    return c1 * np.sqrt(np.log(p) / n)


def refit_latent_rows(Y, X, B, Gamma, fam, max_iters=100, step_tol=1e-10):
    """Per-sample MLE of the latent factors with (B, Gamma) frozen.

    Batched Fisher scoring over rows; used by the sample-splitting
    inference path.  Returns Z (n x r).
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    Gamma = np.asarray(Gamma, dtype=float)
    n, p = Y.shape
    r = Gamma.shape[1]
    if r == 0:
        return np.zeros((n, 0))
    offset = X @ np.asarray(B, dtype=float).T
    Z = np.zeros((n, r))
    eye = np.eye(r)

    def row_obj(eta):
        with np.errstate(over="ignore", invalid="ignore"):
            vals = np.sum(fam.nll_cells(Y, eta), axis=1) / p
        return np.where(np.isfinite(vals), vals, np.inf)

    obj = row_obj(offset + Z @ Gamma.T)
    for _ in range(max_iters):
        eta = offset + Z @ Gamma.T
        with np.errstate(over="ignore", invalid="ignore"):
            Wc = np.nan_to_num(fam.weight_from_eta(eta), nan=0.0, posinf=1e12)
            Gc = np.nan_to_num(
                (fam.mean_from_eta(eta) - Y) * fam.dtheta_deta(eta),
                nan=0.0, posinf=1e12, neginf=-1e12,
            )
        grad = Gc @ Gamma / p
        H = np.einsum("np,pk,pl->nkl", Wc, Gamma, Gamma) / p + 1e-10 * eye[None]
        step = np.linalg.solve(H, grad[..., None])[..., 0]
        if np.max(np.abs(step)) < step_tol:
            break
        t = np.ones(n)
        for _ in range(30):
            cand_obj = row_obj(offset + (Z - t[:, None] * step) @ Gamma.T)
            worse = ~(cand_obj <= obj + 1e-12)
            if not np.any(worse):
                break
            t = np.where(worse, t / 2.0, t)
        t = np.where(cand_obj <= obj + 1e-12, t, 0.0)
        if not np.any(t):
            break
        Z = Z - t[:, None] * step
        obj = row_obj(offset + Z @ Gamma.T)
    return Z
