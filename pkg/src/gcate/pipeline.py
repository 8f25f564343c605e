"""End-to-end orchestration: three-stage fit and the simulation harness."""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .expfam import ExponentialFamily, NEGBIN, family as make_family
from .inference import DebiasConfig, bh_adjust, run_inference, run_split_inference
from .model import FactorModelFit, GlmDataset
from .optimize import (
    OptimOptions,
    default_lambda,
    solve_stage1,
    solve_stage2_extract,
    solve_stage3,
    _eta_box,
)
from .simulate import (
    MetricsReport,
    SimulationScenario,
    evaluate,
    generate,
    prepare_negbin_family,
    rng_stream,
    run_baselines,
)


def resolve_family(kind, dataset=None, phi="auto", nb_link="log"):
    """Family object from CLI-style arguments.

    Negative binomial with phi='auto' estimates per-gene dispersions by
    method of moments from a Poisson marginal fit and freezes them.
    """
    if isinstance(kind, ExponentialFamily):
        return kind
    kind = str(kind).lower()
    if kind == NEGBIN:
        if phi == "auto":
            if dataset is None:
                raise ValueError("phi='auto' needs the dataset")
            fam = prepare_negbin_family(dataset.Y, dataset.X, "auto")
            return ExponentialFamily(NEGBIN, fam.aux, str(nb_link).lower())
        return ExponentialFamily(NEGBIN, float(phi), str(nb_link).lower())
    return make_family(kind)


def fit_gcate(dataset, r, fam, opts=None, lam="auto"):
    """Run the three estimation stages and assemble the fit."""
    opts = opts or OptimOptions()
    fam = resolve_family(fam, dataset)
    fam.validate_response(dataset.Y)
    Y, X = dataset.Y, dataset.X
    if lam == "auto" or lam is None:
        lam = default_lambda(dataset.n, dataset.p, fam)
    lam = float(lam)
    F_hat, W0_hat, Gamma0_hat, _, diag1 = solve_stage1(Y, X, r, fam, opts)
    W_hat, Gamma_hat = solve_stage2_extract(W0_hat, Gamma0_hat)
    B_hat, Z_hat, eta, diag3 = solve_stage3(
        Y, X, Gamma_hat, lam, fam, opts, F_hat=F_hat, W_hat=W_hat
    )
    box = _eta_box(fam, opts.bound_c)
    theta_hat = fam.natural_param(np.clip(eta, box[0], box[1]))
    return FactorModelFit(
        family=fam,
        r=Gamma_hat.shape[1],
        F_hat=F_hat,
        W0_hat=W0_hat,
        Gamma0_hat=Gamma0_hat,
        W_hat=W_hat,
        Gamma_hat=Gamma_hat,
        B_hat=B_hat,
        Z_hat=Z_hat,
        Theta_hat=theta_hat,
        lam=lam,
        diagnostics={"stage1": diag1, "stage3": diag3},
    )


# ---- replicated simulation studies ---------------------------------------


def child_seed(seed, *tags):
    return int(rng_stream(seed, *tags).integers(0, 2**63 - 1))


def _one_replicate(args):
    (scenario_dict, rep, master_seed, r_fit, methods, alpha, fdr_cut,
     split, split_ratio, opt_overrides) = args
    cfg = SimulationScenario(**scenario_dict)
    cfg = replace(cfg, seed=child_seed(master_seed, "rep", rep))
    dataset, truth = generate(cfg)
    mask = truth["mask"]
    coef = truth["tested_coef"]
    if "keep_mask" in truth:
        keep = truth["keep_mask"]
        dataset = GlmDataset(
            dataset.Y[:, keep], dataset.X,
            gene_names=[g for g, k in zip(dataset.gene_names, keep) if k],
            oracle_Z=dataset.oracle_Z,
        )
        mask = mask[keep]
    out = {}
    is_nb = cfg.kind == "negbin-sc"
    if "gcate" in methods:
        fam = prepare_negbin_family(dataset.Y, dataset.X) if is_nb else truth["family"]
        opts = OptimOptions(**opt_overrides) if opt_overrides else OptimOptions()
        r_use = r_fit if r_fit is not None else (cfg.n_batches - 1 if is_nb else cfg.r)
        dcfg = DebiasConfig(
            coef_index=coef, alpha=alpha, fdr_cut=fdr_cut,
            split=split, split_ratio=split_ratio,
            seed=child_seed(master_seed, "split", rep),
        )
        if split != "none" and split_ratio < 1.0:
            res = run_split_inference(dataset, r_use, fam, dcfg, opts=opts)
        else:
            fit = fit_gcate(dataset, r_use, fam, opts=opts)
            res = run_inference(dataset, fit, dcfg)
        out["gcate"] = evaluate(res.pvalue, res.qvalue, mask, alpha, fdr_cut)
    base_methods = [m for m in methods if m in ("naive", "oracle")]
    if base_methods:
        fam_naive = prepare_negbin_family(dataset.Y, dataset.X) if is_nb else truth["family"]
        if "naive" in base_methods:
            base = run_baselines(dataset, fam_naive, coef, methods=("naive",))
            pv = base["naive"]["pvalue"]
            out["naive"] = evaluate(pv, bh_adjust(pv), mask, alpha, fdr_cut)
        if "oracle" in base_methods:
            Xo = np.column_stack([dataset.X, dataset.oracle_Z])
            fam_oracle = prepare_negbin_family(dataset.Y, Xo) if is_nb else truth["family"]
            base = run_baselines(dataset, fam_oracle, coef, methods=("oracle",))
            pv = base["oracle"]["pvalue"]
            out["oracle"] = evaluate(pv, bh_adjust(pv), mask, alpha, fdr_cut)
    return rep, out


def run_simulation(scenario, reps=20, methods=("gcate", "naive", "oracle"),
                   alpha=0.05, fdr_cut=0.2, seed=0, r_fit=None, threads=1,
                   split="none", split_ratio=1.0, opt_overrides=None):
    """Replicated scenario study; returns per-replicate and median metrics."""
    scenario_dict = {k: v for k, v in scenario.__dict__.items()}
    jobs = [
        (scenario_dict, rep, seed, r_fit, tuple(methods), alpha, fdr_cut,
         split, split_ratio, opt_overrides)
        for rep in range(reps)
    ]
    results = [None] * reps
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rep, out in pool.map(_one_replicate, jobs):
                results[rep] = out
    else:
        for job in jobs:
            rep, out = _one_replicate(job)
            results[rep] = out
    per_method = {}
    for m in methods:
        reports = [res[m] for res in results if m in res]
        per_method[m] = {
            "replicates": [r.__dict__ for r in reports],
            "median": _median_report(reports),
        }
    return {
        "scenario": scenario_dict,
        "reps": reps,
        "seed": seed,
        "alpha": alpha,
        "fdr_cut": fdr_cut,
        "methods": per_method,
    }


def _median_report(reports):
    if not reports:
        return {}
    keys = ("type1", "fdp", "power", "precision", "n_discoveries")
    med = {}
    for k in keys:
        vals = np.asarray([getattr(r, k) for r in reports], dtype=float)
        med[k] = float(np.nanmedian(vals)) if np.any(np.isfinite(vals)) else math.nan
    return med
