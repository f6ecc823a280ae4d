"""Command-line interface.

Subcommands: ``simulate`` synthetic data, ``fit`` a model (online or batch),
``diagnose`` a saved fit, ``sample`` from its posterior approximation,
``mcmc`` for the reference chain, and ``compare`` a fit against chain
samples. Every command is seeded and bit-reproducible; exit codes are 0 on
success (fit: converged), 1 on usage errors, 2 on a fit that did not
converge, 3 on numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
import warnings

import numpy as np

from . import diagnostics, fitdoc, mcmc
from .batch import BatchConfig, fit_batch
from .errors import (
    ConditioningError,
    FactorizationError,
    HiervbError,
    LineSearchError,
    SchemaVersionError,
)
from .estimators import EstimatorKind
from .graph import IndependenceWarning, build_approximation
from .models import (
    SvParams,
    load_series,
    make_conjugate_normal,
    make_sv_model,
    save_series,
    simulate_sv,
)
from .online import OnlineConfig, fit_online

ESTIMATOR_NAMES = {
    "sample-cov": "sample-cov",
    "grad": "gaussian-grad",
    "grad-hess": "gaussian-grad-hess",
}

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NOT_CONVERGED = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse with the usage-error exit code this tool promises."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_model(name: str, data_path: str | None, params: dict):
    if name == "conjugate":
        if data_path is None:
            raise ValueError("--data is required")
        y = load_series(data_path)
        return make_conjugate_normal(
            params.get("prior_mean", 0.0),
            params.get("prior_var", 1.0),
            params.get("obs_var", 1.0),
            y,
        )
    if name in ("sv-a", "sv-b", "sv-c"):
        if data_path is None:
            raise ValueError("--data is required")
        y = load_series(data_path)
        return make_sv_model(name, y)
    raise ValueError(f"unknown model {name!r}")


def _quiet_graph(model):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IndependenceWarning)
        return build_approximation(model.spec)


def _rebuild_from_document(doc: dict, data_override: str | None):
    info = doc["model"]
    data_path = data_override or info.get("data_path")
    model = _build_model(info["name"], data_path, info.get("params", {}))
    return model, _quiet_graph(model)


def _write_samples_csv(path, columns, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def cmd_simulate(args) -> int:
    params = SvParams(mu=args.mu, phi=args.phi, sigma2=args.sigma2, n_obs=args.T)
    y = simulate_sv(params, np.random.default_rng(args.seed))
    save_series(args.out, y)
    print(
        f"wrote {args.T} observations to {args.out} "
        f"(mu={args.mu} phi={args.phi} sigma2={args.sigma2} seed={args.seed})"
    )
    return EXIT_OK


def cmd_fit(args) -> int:
    model_params = {}
    if args.model == "conjugate":
        model_params = {
            "prior_mean": args.prior_mean,
            "prior_var": args.prior_var,
            "obs_var": args.obs_var,
        }
    model = _build_model(args.model, args.data, model_params)
    graph = build_approximation(model.spec)
    estimator = EstimatorKind(ESTIMATOR_NAMES[args.estimator])

    start = time.perf_counter()
    if args.method == "online":
        config = OnlineConfig(
            c_mss=args.cmss,
            c_tol=args.ctol,
            n_avg=args.navg,
            max_iters=args.maxiters,
            seed=args.seed if args.seed is not None else 0,
            estimator=estimator,
        )
        result = fit_online(model, graph, config)
    else:
        config = BatchConfig(
            seed_star=args.seed if args.seed is not None else 12345,
            n_samples=args.nsamples,
            c_curv=args.ccurv,
            c_mss=args.cmss_batch,
            grad_tol=args.gradtol,
            max_outer=args.maxouter,
            estimator=EstimatorKind(ESTIMATOR_NAMES[args.estimator], pathwise=True),
            warmup_iters=args.warmup,
        )
        result = fit_batch(model, graph, config)
    elapsed = time.perf_counter() - start

    doc = fitdoc.fit_document(args.model, model_params, args.data, result, graph)
    fitdoc.write_fit_document(args.out, doc)
    r2 = f"{result.r_squared:.6f}" if np.isfinite(result.r_squared) else "unavailable"
    print(
        f"fit {args.model} by {args.method}: R^2={r2} "
        f"iterations={result.iterations} wall_time={elapsed:.2f}s -> {args.out}"
    )
    if result.failure:
        print(f"note: {result.failure}", file=sys.stderr)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_diagnose(args) -> int:
    doc = fitdoc.read_fit_document(args.fit)
    model, graph = _rebuild_from_document(doc, args.data)
    state = fitdoc.state_from_document(doc, graph)
    r2 = diagnostics.r_squared(
        model, graph, state, args.n, np.random.default_rng(args.seed)
    )
    norm = diagnostics.natgrad_norm(
        model,
        graph,
        state,
        seed=args.seed,
        n_samples=max(2, args.natgrad_samples),
        estimator=EstimatorKind(ESTIMATOR_NAMES[args.estimator]),
    )
    stored = (doc.get("quality") or {}).get("r_squared")
    print(f"fit document: {args.fit} (stored R^2={stored})")
    print(f"recomputed R^2={r2:.6f} (n={args.n}, seed={args.seed})")
    print(f"natural-gradient norm ||f||/sqrt(K) = {norm:.6g}")
    return EXIT_OK


def cmd_sample(args) -> int:
    doc = fitdoc.read_fit_document(args.fit)
    model, graph = _rebuild_from_document(doc, args.data)
    state = fitdoc.state_from_document(doc, graph)
    rng = np.random.default_rng(args.seed)
    rows = np.empty((args.n, len(graph.coord_names)))
    for i in range(args.n):
        assignment = graph.draw_joint(state, rng)
        pos = 0
        for b in graph.blocks:
            val = np.atleast_1d(np.asarray(assignment[b.name], dtype=float))
            rows[i, pos : pos + b.dim] = val
            pos += b.dim
    _write_samples_csv(args.out, graph.coord_names, rows)
    print(f"wrote {args.n} joint draws to {args.out}")
    return EXIT_OK


def cmd_mcmc(args) -> int:
    model = _build_model(args.model, args.data, {})
    config = mcmc.McmcConfig(
        iterations=args.iterations,
        burnin=args.burnin,
        thin=args.thin,
        seed=args.seed,
        initial_scale=args.scale,
    )
    start = time.perf_counter()
    result = mcmc.run_metropolis(model, config)
    elapsed = time.perf_counter() - start
    mcmc.save_samples(args.out, result)
    acc = " ".join(f"{k}={v:.2f}" for k, v in result.acceptance.items())
    print(
        f"chain: {result.samples.shape[0]} retained draws in {elapsed:.1f}s "
        f"(acceptance {acc}) -> {args.out}"
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    doc = fitdoc.read_fit_document(args.fit)
    model, graph = _rebuild_from_document(doc, args.data)
    state = fitdoc.state_from_document(doc, graph)
    chain = mcmc.load_samples(args.mcmc)
    rows = mcmc.compare(state, chain, graph, n_samples=args.n, seed=args.seed)
    header = (
        "name,vb_mean,vb_sd,mcmc_mean,mcmc_sd,std_mean_diff,sd_ratio,flagged"
    )
    lines = [header]
    for r in rows:
        lines.append(
            f"{r.name},{r.vb_mean!r},{r.vb_sd!r},{r.mcmc_mean!r},{r.mcmc_sd!r},"
            f"{r.std_mean_diff!r},{r.sd_ratio!r},{int(r.flagged)}"
        )
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    show = [r for r in rows if not r.name.startswith("v[")] or list(rows)
    print(f"{'name':>10} {'vb_mean':>10} {'mcmc_mean':>10} {'sd_ratio':>9} flag")
    for r in show[:12]:
        flag = "sd-underestimated" if r.flagged else ""
        print(
            f"{r.name:>10} {r.vb_mean:>10.4f} {r.mcmc_mean:>10.4f} "
            f"{r.sd_ratio:>9.3f} {flag}"
        )
    n_flagged = sum(r.flagged for r in rows)
    print(f"{len(rows)} variables compared, {n_flagged} flagged")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiervb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic return series")
    p.add_argument("--model", choices=["sv"], default="sv")
    p.add_argument("--mu", type=float, default=-1.0)
    p.add_argument("--phi", type=float, default=0.95)
    p.add_argument("--sigma2", type=float, default=0.05)
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a posterior approximation")
    p.add_argument("--model", choices=["conjugate", "sv-a", "sv-b", "sv-c"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["online", "batch"], default="online")
    p.add_argument("--estimator", choices=sorted(ESTIMATOR_NAMES), default="grad-hess")
    p.add_argument("--seed", type=int, default=None,
                   help="online seed (default 0) or batch fixed seed (default 12345)")
    p.add_argument("--ctol", type=float, default=1e-4)
    p.add_argument("--cmss", type=float, default=10.0)
    p.add_argument("--navg", type=int, default=50)
    p.add_argument("--maxiters", type=int, default=50_000)
    p.add_argument("--nsamples", type=int, default=None,
                   help="batch draws per gradient (default: two-phase schedule)")
    p.add_argument("--ccurv", type=float, default=0.5)
    p.add_argument("--cmss-batch", dest="cmss_batch", type=float, default=100.0)
    p.add_argument("--gradtol", type=float, default=1e-3)
    p.add_argument("--maxouter", type=int, default=200)
    p.add_argument("--warmup", type=int, default=300)
    p.add_argument("--prior-mean", dest="prior_mean", type=float, default=0.0)
    p.add_argument("--prior-var", dest="prior_var", type=float, default=1.0)
    p.add_argument("--obs-var", dest="obs_var", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="recompute quality measures for a fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", default=None, help="override the data path in the document")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--natgrad-samples", dest="natgrad_samples", type=int, default=10)
    p.add_argument("--estimator", choices=sorted(ESTIMATOR_NAMES), default="grad-hess")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sample", help="draw joint samples from a fitted approximation")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("mcmc", help="run the reference Metropolis chain")
    p.add_argument("--model", choices=["conjugate", "sv-a", "sv-b", "sv-c"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iterations", type=int, default=200_000)
    p.add_argument("--burnin", type=int, default=50_000)
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mcmc)

    p = sub.add_parser("compare", help="compare a fit against reference samples")
    p.add_argument("--fit", required=True)
    p.add_argument("--mcmc", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaVersionError as exc:
        print(f"refusing to read fit document: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConditioningError, LineSearchError, FactorizationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HiervbError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
