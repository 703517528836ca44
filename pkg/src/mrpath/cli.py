"""Command-line interface.

Subcommands: ``fit``, ``select-k``, ``posterior``, ``simulate``, ``bench``,
``plot``.  Exit codes: 0 success, 1 usage error, 2 data error, 3
non-convergence.  MRPATH_THREADS caps the worker count of replication
studies and multi-candidate fits.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from . import __version__, bench, dataio, plotting
from .baseline import BaselineError
from .inference import InferenceError, wald_intervals
from .mcem import McemConfig, NonConvergenceError, fit
from .model import MixtureParams, ModelError
from .model_select import select_k
from .posterior import DEFAULT_M, DEFAULT_N_OUT, summarize_posteriors
from .simulate import PRESET_NAMES, SimConfig, preset_config, simulate_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NONCONVERGED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _add_fit_options(sub):
    sub.add_argument("--input", required=True, help="summary-statistics TSV")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--m0", type=int, default=500, help="initial MC sample size")
    sub.add_argument("--alpha", type=float, default=0.10, help="ascent-test level")
    sub.add_argument("--gamma", type=float, default=0.05, help="stopping-test level")
    sub.add_argument("--epsilon", type=float, default=None,
                     help="stopping threshold (default 5e-5 * p)")
    sub.add_argument("--growth", type=float, default=1.5)
    sub.add_argument("--restarts", type=int, default=10)
    sub.add_argument("--max-iters", type=int, default=200)
    sub.add_argument("--fix-exposure-prior", action="store_true")
    sub.add_argument("--level", type=float, default=0.95, help="CI level")
    sub.add_argument("--out", required=True, help="output directory")


def _config_from_args(args) -> McemConfig:
    return McemConfig(
        m0=args.m0,
        growth=args.growth,
        alpha=args.alpha,
        gamma=args.gamma,
        epsilon=args.epsilon,
        max_iters=args.max_iters,
        n_restarts=args.restarts,
        seed=args.seed,
        fix_exposure_prior=args.fix_exposure_prior,
    )


def _config_echo(args, extra=None) -> dict:
    echo = {
        k: v for k, v in sorted(vars(args).items())
        if k not in ("func", "command") and not callable(v)
    }
    if extra:
        echo.update(extra)
    return echo


def _attach_cis(result, data, level):
    try:
        wald_intervals(result, data, level=level)
    except InferenceError as exc:
        result.diagnostics.append(f"standard errors unavailable: {exc}")
        logger.warning("standard errors unavailable: %s", exc)


def cmd_fit(args) -> int:
    data = dataio.read_summary_tsv(args.input)
    config = _config_from_args(args)
    manifest = dataio.build_manifest(args.input, _config_echo(args), args.seed)
    t0 = time.time()
    result = fit(data, args.k, config)
    t_fit = time.time() - t0
    _attach_cis(result, data, args.level)
    from .model_select import modified_bic

    result.bic = modified_bic(result.q_tilde_final, result.k, result.p)
    dataio.write_results(
        args.out, result, manifest=manifest,
        timings={"fit": round(t_fit, 3), "total": round(time.time() - t0, 3)},
    )
    print(f"fit: K={result.k} converged={result.converged} "
          f"q_tilde={result.q_tilde_final:.3f} -> {args.out}")
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def cmd_select_k(args) -> int:
    if args.k_min > args.k_max:
        raise ModelError("--k-min must not exceed --k-max")
    data = dataio.read_summary_tsv(args.input)
    config = _config_from_args(args)
    manifest = dataio.build_manifest(args.input, _config_echo(args), args.seed)
    t0 = time.time()
    selection = select_k(data, range(args.k_min, args.k_max + 1), config)
    t_sel = time.time() - t0
    best = selection.best_fit
    _attach_cis(best, data, args.level)
    dataio.write_results(
        args.out, best, selection=selection, manifest=manifest,
        timings={"select_k": round(t_sel, 3), "total": round(time.time() - t0, 3)},
    )
    table = ", ".join(f"K={k}: {selection.bics[k]:.2f}" for k in selection.candidates)
    print(f"select-k: chosen K={selection.chosen_k} ({table}) -> {args.out}")
    return EXIT_OK


def cmd_posterior(args) -> int:
    data = dataio.read_summary_tsv(args.input)
    results = dataio.read_results(args.params)
    params = MixtureParams.from_dict(results["fit"]["params"])
    posteriors = summarize_posteriors(
        data, params, level=args.level, m=args.m, n_out=args.n_out, seed=args.seed
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = dataio.write_posteriors_csv(
        out_dir / "posteriors.csv", posteriors, results["run_id"]
    )
    print(f"posterior: {len(posteriors)} SNPs -> {path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.preset:
        kwargs = {}
        if args.k_true is not None:
            kwargs["k_true"] = args.k_true
        if args.sqrtp_lambda is not None:
            kwargs["sqrtp_lambda"] = args.sqrtp_lambda
        if args.sigma1 is not None:
            kwargs["sigma1"] = args.sigma1
        config = preset_config(args.preset, p=args.p, seed=args.seed, **kwargs)
    else:
        required = (args.p, args.weights, args.means, args.sds, args.lambda_x)
        if any(v is None for v in required):
            raise ModelError(
                "explicit simulation needs --p, --weights, --means, --sds, --lambda-x"
            )
        weights = [float(x) for x in args.weights.split(",")]
        means = [float(x) for x in args.means.split(",")]
        sds = [float(x) for x in args.sds.split(",")]
        params = MixtureParams(
            weights, means, [s**2 for s in sds], args.nu_x, args.lambda_x**2
        )
        config = SimConfig(
            p=args.p,
            params_true=params,
            pleiotropy=args.pleiotropy,
            point_mass_betas=args.point_mass_betas,
            seed=args.seed,
        )
    out = simulate_dataset(config)
    dataio.write_summary_tsv(args.out, out.dataset)
    print(f"simulate: p={out.dataset.p} -> {args.out}")
    if args.truth_out:
        dataio.write_truth_csv(args.truth_out, out)
        print(f"simulate: truth -> {args.truth_out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    study = bench.STUDIES[args.study]
    kwargs = {"seed": args.seed}
    if args.study == "recovery":
        kwargs.update(k_true=args.k_true or 1, p=args.p or 500, n_reps=args.reps)
    elif args.study == "coverage":
        kwargs.update(k_true=args.k_true or 1, p=args.p or 500, n_reps=args.reps)
    elif args.study == "selection":
        kwargs.update(
            p=args.p or 250, sqrtp_lambda=args.sqrtp_lambda or 5.0,
            k_true=args.k_true or 2, n_reps=args.reps,
        )
        if args.sigma1 is not None:
            kwargs["sigma1"] = args.sigma1
    elif args.study == "weak-instrument":
        kwargs.update(n_reps=args.reps)
    elif args.study == "pleiotropy":
        kwargs.update(mode=args.mode, n_reps=args.reps)
    elif args.study == "sensitivity":
        kwargs.update(scenario=args.scenario, n_starts=args.reps)
    rows, summary = study(**kwargs)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    summary_path = out.with_suffix(".summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(summary), lineterminator="\n")
        writer.writeheader()
        writer.writerow(summary)
    print(f"bench {args.study}: {len(rows)} rows -> {out}; summary -> {summary_path}")
    return EXIT_OK


def cmd_plot(args) -> int:
    data = dataio.read_summary_tsv(args.input)
    results = dataio.read_results(args.results)
    from .mcem import FitResult

    params = MixtureParams.from_dict(results["fit"]["params"])
    shell = FitResult(
        params=params, q_tilde_final=results["fit"]["q_tilde"],
        k=results["fit"]["k"], p=results["fit"]["p"],
        m_final=results["fit"]["m_final"], converged=results["fit"]["converged"],
        trace=[], best_restart=results["fit"]["best_restart"],
        n_restarts=results["fit"]["n_restarts"], seed=results["fit"]["seed"],
        epsilon=0.0,
    )
    posteriors = None
    if args.posteriors:
        posteriors = _read_posteriors_for_plot(args.posteriors)
    path = plotting.render_scatter_svg(data, shell, posteriors, args.out)
    print(f"plot: -> {path}")
    return EXIT_OK


def _read_posteriors_for_plot(path):
    from .posterior import PosteriorSummary
    import numpy as np

    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            probs = [
                float(v) for k, v in row.items() if k.startswith("prob_cluster_")
            ]
            out.append(
                PosteriorSummary(
                    snp_id=row["snp_id"],
                    membership_probs=np.array(probs),
                    beta_median=float(row["beta_median"]),
                    beta_ci=(float(row["beta_lower"]), float(row["beta_upper"])),
                    assigned_cluster=int(row["assigned_cluster"]),
                    n_resamples=int(row["n_resamples"]),
                )
            )
    return out


def build_parser() -> _Parser:
    parser = _Parser(prog="mrpath", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mrpath {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("fit", help="fit the mixture model for a fixed K")
    sub.add_argument("--k", type=int, required=True)
    _add_fit_options(sub)
    sub.set_defaults(func=cmd_fit)

    sub = subs.add_parser("select-k", help="fit a range of K and pick by BIC")
    sub.add_argument("--k-min", type=int, default=1)
    sub.add_argument("--k-max", type=int, default=3)
    _add_fit_options(sub)
    sub.set_defaults(func=cmd_select_k)

    sub = subs.add_parser("posterior", help="per-SNP posterior summaries")
    sub.add_argument("--input", required=True)
    sub.add_argument("--params", required=True, help="results.json from fit/select-k")
    sub.add_argument("--level", type=float, default=0.95)
    sub.add_argument("--m", type=int, default=DEFAULT_M)
    sub.add_argument("--n-out", type=int, default=DEFAULT_N_OUT)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", required=True, help="output directory")
    sub.set_defaults(func=cmd_posterior)

    sub = subs.add_parser("simulate", help="generate synthetic summary data")
    sub.add_argument("--preset", choices=PRESET_NAMES)
    sub.add_argument("--p", type=int)
    sub.add_argument("--k-true", type=int)
    sub.add_argument("--sqrtp-lambda", type=float)
    sub.add_argument("--sigma1", type=float)
    sub.add_argument("--weights")
    sub.add_argument("--means")
    sub.add_argument("--sds")
    sub.add_argument("--nu-x", type=float, default=0.0)
    sub.add_argument("--lambda-x", type=float)
    sub.add_argument("--pleiotropy", default="none",
                     choices=("none", "normal", "laplace", "idiosyncratic"))
    sub.add_argument("--point-mass-betas", action="store_true")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", required=True, help="output TSV")
    sub.add_argument("--truth-out", help="optional ground-truth CSV")
    sub.set_defaults(func=cmd_simulate)

    sub = subs.add_parser("bench", help="replication studies (aggregate CSVs)")
    sub.add_argument("--study", required=True, choices=sorted(bench.STUDIES))
    sub.add_argument("--reps", type=int, default=100)
    sub.add_argument("--p", type=int)
    sub.add_argument("--k-true", type=int)
    sub.add_argument("--sqrtp-lambda", type=float)
    sub.add_argument("--sigma1", type=float)
    sub.add_argument("--mode", default="normal",
                     choices=("normal", "laplace", "idiosyncratic"))
    sub.add_argument("--scenario", default="low", choices=("low", "high"))
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", required=True, help="output CSV")
    sub.set_defaults(func=cmd_bench)

    sub = subs.add_parser("plot", help="render the scatter SVG")
    sub.add_argument("--input", required=True)
    sub.add_argument("--results", required=True)
    sub.add_argument("--posteriors")
    sub.add_argument("--out", required=True, help="output SVG")
    sub.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (dataio.DataError, ModelError, BaselineError) as exc:
        print(f"mrpath: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonConvergenceError as exc:
        print(f"mrpath: non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except FileNotFoundError as exc:
        print(f"mrpath: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
