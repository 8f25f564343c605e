"""Command-line interface: fit, test, select-rank, simulate.

Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.
Diagnostics go to stderr; results go to the requested output files.
"""

import argparse
import os
import sys

import numpy as np

from . import io as gio
from .inference import DebiasConfig, run_inference, run_split_inference
from .model import GlmDataset
from .optimize import OptimOptions
from .pipeline import fit_gcate, resolve_family, run_simulation
from .rank_select import select_rank
from .simulate import SimulationScenario


def _default_threads():
    env = os.environ.get("GCATE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _add_data_args(sub):
    sub.add_argument("--counts", required=True, help="counts CSV (header = gene names) or MatrixMarket file")
    sub.add_argument("--design", required=True, help="design matrix CSV")
    sub.add_argument("--family", required=True,
                     choices=["gaussian", "bernoulli", "binomial", "poisson", "negbin"])
    sub.add_argument("--nb-link", default="log", choices=["canonical", "log"],
                     help="link for the negbin family (default log)")
    sub.add_argument("--phi", default="auto",
                     help="negbin dispersion: 'auto' (method of moments) or a fixed value")
    sub.add_argument("--aux", type=float, default=None,
                     help="family auxiliary parameter (gaussian variance, binomial trials)")


def _add_optim_args(sub):
    sub.add_argument("--lambda", dest="lam", default="auto",
                     help="lasso level, 'auto' for c1 sqrt(log p / n)")
    sub.add_argument("--c-prime", type=float, default=None,
                     help="gradient ball radius constant C' (radius is 2 C')")
    sub.add_argument("--max-iters", type=int, default=200)
    sub.add_argument("--tol", type=float, default=1e-4)
    sub.add_argument("--bound-c", type=float, default=30.0,
                     help="natural-parameter box half-width")


def _build_opts(args):
    kwargs = {
        "max_outer_iters": args.max_iters,
        "obj_tol": args.tol,
        "bound_c": args.bound_c,
    }
    if args.c_prime is not None:
        kwargs["grad_ball_radius"] = 2.0 * args.c_prime
    return OptimOptions(**kwargs)


def _load_dataset(args):
    Y, names = gio.read_counts(args.counts)
    X = gio.read_design(args.design)
    return GlmDataset(Y, X, gene_names=names)


def _family_from_args(args, dataset):
    if args.family == "negbin":
        phi = args.phi
        if phi != "auto":
            phi = float(phi)
        return resolve_family("negbin", dataset, phi=phi, nb_link=args.nb_link)
    fam = resolve_family(args.family)
    if args.aux is not None:
        fam = fam.with_aux(args.aux)
    return fam


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gcate",
        description="Confounder-adjusted estimation and testing for multivariate GLMs",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    fit = subs.add_parser("fit", help="three-stage factor-adjusted fit")
    _add_data_args(fit)
    _add_optim_args(fit)
    fit.add_argument("--rank", type=int, required=True, help="number of latent factors")
    fit.add_argument("--out", required=True, help="output fit artifact (JSON)")
    fit.add_argument("--threads", type=int, default=_default_threads())
    fit.add_argument("--seed", type=int, default=0)

    test = subs.add_parser("test", help="debiased per-gene tests from a fit artifact")
    test.add_argument("--fit", required=True, help="fit artifact from `gcate fit`")
    test.add_argument("--coef", type=int, default=1, help="1-based tested column of X")
    test.add_argument("--lambda-n", dest="lambda_n", default="auto",
                      help="'auto' or a fixed c2 multiplier of sqrt(log n / n)")
    test.add_argument("--alpha", type=float, default=0.05)
    test.add_argument("--fdr", type=float, default=0.2)
    test.add_argument("--split", default="none", choices=["none", "half"])
    test.add_argument("--split-ratio", type=float, default=0.5,
                      help="fraction of samples reserved for inference when splitting")
    test.add_argument("--u-mode", default="per-gene", choices=["per-gene", "shared"],
                      help="projection direction per gene (default) or one shared "
                           "direction at gene-averaged weights")
    test.add_argument("--leave-one-out", action="store_true",
                      help="strict split mode: drop the tested gene from its Z refit")
    test.add_argument("--tau-n", type=float, default=None,
                      help="restore the |x_i'u| <= tau_n constraint")
    test.add_argument("--seed", type=int, default=0)
    test.add_argument("--out", required=True, help="output results TSV")

    sel = subs.add_parser("select-rank", help="JIC scan over a rank grid")
    _add_data_args(sel)
    _add_optim_args(sel)
    sel.add_argument("--r-min", type=int, default=1)
    sel.add_argument("--r-max", type=int, default=10)
    sel.add_argument("--c-jic", type=float, default=1.0)
    sel.add_argument("--out", required=True, help="output JIC trace (JSON)")
    sel.add_argument("--seed", type=int, default=0)

    sim = subs.add_parser("simulate", help="replicated benchmark harness")
    sim.add_argument("--scenario", default="poisson-bulk",
                     choices=["poisson-bulk", "negbin-sc", "gaussian-bulk"])
    sim.add_argument("--n", type=int, default=250)
    sim.add_argument("--p", type=int, default=1000)
    sim.add_argument("--rank", type=int, default=2)
    sim.add_argument("--reps", type=int, default=20)
    sim.add_argument("--seed", type=int, default=7)
    sim.add_argument("--alpha", type=float, default=0.05)
    sim.add_argument("--fdr", type=float, default=0.2)
    sim.add_argument("--methods", default="gcate,naive,oracle")
    sim.add_argument("--signal-prob", type=float, default=0.05)
    sim.add_argument("--split", default="none", choices=["none", "half"])
    sim.add_argument("--split-ratio", type=float, default=1.0)
    sim.add_argument("--max-iters", type=int, default=200)
    sim.add_argument("--threads", type=int, default=_default_threads())
    sim.add_argument("--out", required=True, help="output metrics (JSON)")
    return parser


def _cmd_fit(args):
    dataset = _load_dataset(args)
    fam = _family_from_args(args, dataset)
    opts = _build_opts(args)
    fit = fit_gcate(dataset, args.rank, fam, opts=opts, lam=args.lam)
    gio.save_fit(args.out, fit, dataset)
    print(f"fit written to {args.out}", file=sys.stderr)
    return 0


def _cmd_test(args):
    fit, dataset = gio.load_fit(args.fit)
    cfg = DebiasConfig(
        coef_index=args.coef,
        lambda_n="auto" if args.lambda_n == "auto" else float(args.lambda_n),
        tau_n=args.tau_n,
        per_gene_u=args.u_mode == "per-gene",
        split=args.split,
        split_ratio=args.split_ratio if args.split == "half" else 1.0,
        leave_one_out=args.leave_one_out,
        alpha=args.alpha,
        fdr_cut=args.fdr,
        seed=args.seed,
    )
    if args.split == "half" and cfg.split_ratio < 1.0:
        result = run_split_inference(dataset, fit.r, fit.family, cfg, lam=fit.lam)
    else:
        result = run_inference(dataset, fit, cfg)
    gio.write_results_tsv(args.out, result)
    n_fdr = int(np.nansum(np.asarray(result.reject_fdr, dtype=float)))
    print(
        f"tested {len(result.gene_names)} genes; lambda_n={result.lambda_n:.6g}; "
        f"{n_fdr} discoveries at q<{args.fdr}",
        file=sys.stderr,
    )
    return 0


def _cmd_select_rank(args):
    dataset = _load_dataset(args)
    fam = _family_from_args(args, dataset)
    opts = _build_opts(args)
    trace = select_rank(dataset.Y, dataset.X, fam,
                        r_min=args.r_min, r_max=args.r_max,
                        c_jic=args.c_jic, opts=opts)
    doc = {
        "r_values": trace.r_values,
        "deviance": trace.deviance,
        "penalty": trace.penalty,
        "jic": trace.jic,
        "selected_r": trace.selected_r,
        "c_jic": trace.c_jic,
        "scree": trace.increments(),
    }
    gio.write_json(args.out, doc)
    print(f"selected r = {trace.selected_r}", file=sys.stderr)
    return 0


def _cmd_simulate(args):
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    bad = [m for m in methods if m not in ("gcate", "naive", "oracle")]
    if bad:
        raise ValueError(f"unknown methods: {', '.join(bad)}")
    scenario = SimulationScenario(
        kind=args.scenario, n=args.n, p=args.p, r=args.rank,
        signal_prob=args.signal_prob,
    )
    report = run_simulation(
        scenario, reps=args.reps, methods=methods, alpha=args.alpha,
        fdr_cut=args.fdr, seed=args.seed, r_fit=args.rank,
        threads=args.threads, split=args.split, split_ratio=args.split_ratio,
        opt_overrides={"max_outer_iters": args.max_iters},
    )
    import datetime

    report["created_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    gio.write_json(args.out, report)
    for m in methods:
        med = report["methods"][m]["median"]
        print(
            f"{m}: median type1={med.get('type1', float('nan')):.4f} "
            f"fdp={med.get('fdp', float('nan')):.4f} "
            f"power={med.get('power', float('nan')):.4f}",
            file=sys.stderr,
        )
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "test": _cmd_test,
    "select-rank": _cmd_select_rank,
    "simulate": _cmd_simulate,
}


def parse_and_dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"gcate: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
