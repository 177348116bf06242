import argparse
import os
import sys

import numpy as np
from loguru import logger

from bstc import log
from bstc.config import PRESETS, ChainConfig
from bstc.constant import (
    EXIT_INVALID,
    EXIT_NUMERICAL,
    EXIT_OK,
    BSTCError,
    DataError,
    NumericalError,
    __version__,
)
from bstc.data import autocorrelation_table, load_adjacency, load_panel, standardize
from bstc.manifest import RunManifest
from bstc.metrics import MetricReport, add_fit_metrics, evaluate_forecasts, write_metrics
from bstc.partition import (
    entropy_diagnostics,
    expected_binder_loss,
    expected_gvi_loss,
    loss_sensitivity,
    minimize_binder,
    minimize_gvi,
    posterior_similarity_matrix,
    read_partition,
    write_partition,
)
from bstc.report import render
from bstc.sampler import posterior_cluster_summary, run_chains
from bstc.simulate import DEFAULT_T, seven_region_spec, simulate_dataset, write_simulation
from bstc.store import load_chain, save_chain


def resolve_config(args) -> ChainConfig:
    """Preset, then config file, then command-line flags."""
    config = ChainConfig.preset(getattr(args, "preset", None) or "production")
    if getattr(args, "config", None):
        config = ChainConfig.from_file(args.config, base=config)
    config = config.replace(
        seed=getattr(args, "seed", None),
        iterations=getattr(args, "iterations", None),
        burn_in=getattr(args, "burn_in", None),
        thin=getattr(args, "thin", None),
        n_chains=getattr(args, "chains", None),
        workers=getattr(args, "jobs", None),
    )
    return config.validate()


def load_inputs(args, manifest: RunManifest):
    data = load_panel(args.panel)
    graph = load_adjacency(args.adj, data.unit_ids)
    manifest.add_input("panel", args.panel)
    manifest.add_input("adjacency", args.adj)
    scaling = None
    if not args.no_standardize:
        data, scaling = standardize(data)
        logger.info("Standardized response and predictors")
    return data, graph, scaling


def fit(args, manifest: RunManifest):
    config = resolve_config(args)
    data, graph, scaling = load_inputs(args, manifest)
    if args.fixed_partition:
        partition = read_partition(args.fixed_partition, data.unit_ids)
        manifest.add_input("fixed_partition", args.fixed_partition)
        config = config.replace(fixed_partition=[int(v) for v in partition.labels])
        logger.info(f"Sampling conditionally on a fixed partition with {partition.k} clusters")
    manifest.config = config.to_items()
    manifest.seed = config.seed

    logger.info(f"BSTC v{__version__}")
    logger.info(f"Chains: {config.n_chains}, processes: {config.workers}")
    output = run_chains(data, graph, config)
    if scaling is not None:
        output.extra.update({f"scaling_{k}": v for k, v in scaling.to_items().items()})
    save_chain(output, args.out, args.level)

    if args.fixed_partition:
        path = os.path.join(args.out, "clusters.csv")
        posterior_cluster_summary(output).to_csv(path, index=False)
        logger.info(f"Wrote cluster summaries to {path}")
    logger.info(
        f"Posterior mean K {output.k.mean():.3g}, acceptance xi {output.acceptance.get('xi', np.nan):.2f}, "
        f"rho {output.acceptance.get('rho', np.nan):.2f}"
    )


def summarize(args, manifest: RunManifest):
    output = load_chain(args.draws)
    manifest.add_input("meta", os.path.join(args.draws, "meta"))
    config = ChainConfig.from_meta(output.config)
    manifest.config = {"loss": args.loss, "a": args.a, "b": args.b, **config.to_items()}
    manifest.seed = config.seed

    draws = output.partitions()
    S = posterior_similarity_matrix(draws)
    if args.loss == "binder":
        estimate = minimize_binder(S, draws, args.a, args.b)
        loss = expected_binder_loss(S, estimate, args.a, args.b)
    else:
        estimate = minimize_gvi(draws, args.a, args.b, config.joint_entropy_scale)
        loss = expected_gvi_loss(draws, estimate, args.a, args.b, config.joint_entropy_scale)

    out = args.out or os.path.join(args.draws, "partition.csv")
    write_partition(out, output.unit_ids, estimate)
    k_values, k_counts = np.unique(output.k, return_counts=True)
    sensitivity = None
    if args.sensitivity:
        table = loss_sensitivity(draws, reference=estimate, joint_scale=config.joint_entropy_scale)
        table.to_csv(os.path.splitext(out)[0] + "_sensitivity.csv", index=False)
        sensitivity = table.to_dict("records")

    text = render(
        "summary.txt",
        draws=output.n_draws,
        loss=args.loss,
        a=args.a,
        b=args.b,
        partition=estimate,
        expected_loss=loss,
        k_mode=int(k_values[np.argmax(k_counts)]),
        k_mass=float(np.mean(output.k == estimate.k)),
        diagnostics=entropy_diagnostics(draws, estimate),
        sensitivity=sensitivity,
    )
    with open(os.path.splitext(out)[0] + "_summary.txt", "w", encoding="utf-8") as f:
        f.write(text)
    print(text)


def metrics(args, manifest: RunManifest):
    config = resolve_config(args)
    data, graph, _ = load_inputs(args, manifest)
    manifest.config = {"t0": args.t0, **config.to_items()}
    manifest.seed = config.seed

    output = None
    if args.draws:
        output = load_chain(args.draws)
        manifest.add_input("meta", os.path.join(args.draws, "meta"))
    if args.no_forecast:
        if output is None:
            raise DataError("Nothing to compute: give --draws or drop --no-forecast")
        report = add_fit_metrics(MetricReport(), output, data)
    else:
        report = evaluate_forecasts(data, graph, config, args.t0, output)
    write_metrics(report, args.out)
    print(render("metrics.txt", report=report))


def simulate(args, manifest: RunManifest):
    spec = seven_region_spec(args.seed)
    manifest.config = {"preset": args.preset, "T": args.T}
    manifest.seed = args.seed
    data, graph, truth = simulate_dataset(spec, args.T)
    write_simulation(args.out, data, graph, truth)


def explore(args, manifest: RunManifest):
    data = load_panel(args.panel)
    graph = load_adjacency(args.adj, data.unit_ids)
    manifest.add_input("panel", args.panel)
    manifest.add_input("adjacency", args.adj)
    table = autocorrelation_table(data, graph)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        table.to_csv(os.path.join(args.out, "autocorrelation.csv"), index=False)
    print(table.to_string(index=False))


def _add_chain_flags(parser):
    parser.add_argument("--config", type=str, default=None, help="Plain-text `key = value` config file.")
    parser.add_argument("--preset", type=str, choices=sorted(PRESETS), default=None, help="Configuration preset.")
    parser.add_argument("--seed", type=int, default=None, help="Random seed.")
    parser.add_argument("--iterations", type=int, default=None, help="Total iterations per chain.")
    parser.add_argument("--burn-in", type=int, default=None, help="Discarded iterations.")
    parser.add_argument("--thin", type=int, default=None, help="Keep every n-th draw after burn-in.")
    parser.add_argument("--chains", type=int, default=None, help="Number of independent chains.")
    parser.add_argument("-j", "--jobs", type=int, default=None, help="Worker processes (default: $BSTC_THREADS).")
    parser.add_argument("--no-standardize", action="store_true", help="Use the data on their original scale.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bstc", description="Bayesian spatio-temporal clustering of areal panels.")
    parser.add_argument("--version", action="version", version=f"bstc {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="Run the MCMC sampler.")
    p.add_argument("--panel", type=str, required=True, help="Long-format panel CSV.")
    p.add_argument("--adj", type=str, required=True, help="Edge list CSV (unit_a,unit_b).")
    p.add_argument("--out", type=str, required=True, help="Output directory for the draws.")
    p.add_argument("--fixed-partition", type=str, default=None, help="Partition CSV (unit,cluster) to condition on.")
    p.add_argument("-l", "--level", type=int, default=0, help="zstd compression level of the draw files (0: none).")
    _add_chain_flags(p)
    p.set_defaults(func=fit)

    p = sub.add_parser("summarize", help="Point estimate of the partition.")
    p.add_argument("--draws", type=str, required=True, help="Draw directory written by `fit`.")
    p.add_argument("--loss", type=str, choices=["binder", "gvi"], default="binder")
    p.add_argument("--a", type=float, default=1.0, help="Cost of separating items that belong together.")
    p.add_argument("--b", type=float, default=1.0, help="Cost of joining items that belong apart.")
    p.add_argument("--out", type=str, default=None, help="Partition CSV (default: <draws>/partition.csv).")
    p.add_argument("--sensitivity", action="store_true", help="Also tabulate estimates over a range of costs.")
    p.set_defaults(func=summarize)

    p = sub.add_parser("metrics", help="WAIC and one-step-ahead predictive metrics.")
    p.add_argument("--panel", type=str, required=True)
    p.add_argument("--adj", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--t0", type=int, default=5, help="First predicted year (1-based).")
    p.add_argument("--draws", type=str, default=None, help="Existing full-panel fit for WAIC and in-sample errors.")
    p.add_argument("--no-forecast", action="store_true", help="Skip the per-year refits.")
    _add_chain_flags(p)
    p.set_defaults(func=metrics)

    p = sub.add_parser("simulate", help="Write a synthetic dataset.")
    p.add_argument("--preset", type=str, choices=["seven-region"], default="seven-region")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=DEFAULT_T, help="Number of time points.")
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=simulate)

    p = sub.add_parser("explore", help="Moran's I and Geary's C of the response.")
    p.add_argument("--panel", type=str, required=True)
    p.add_argument("--adj", type=str, required=True)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=explore)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    if args.verbose:
        log.set_level("DEBUG")

    manifest = RunManifest(args.command)
    status = EXIT_OK
    try:
        args.func(args, manifest)
    except NumericalError as e:
        logger.error(str(e))
        status = EXIT_NUMERICAL
    except BSTCError as e:
        logger.error(str(e))
        status = EXIT_INVALID
    except OSError as e:
        logger.error(f"{e.strerror}: {e.filename}")
        status = EXIT_INVALID

    out_dir = getattr(args, "out", None)
    if args.command == "summarize":
        out_dir = os.path.dirname(os.path.abspath(out_dir)) if out_dir else args.draws
    if out_dir:
        try:
            manifest.finish(status).write(out_dir)
        except OSError as e:
            logger.warning(f"Could not write manifest: {e}")
    if status == EXIT_OK:
        logger.success("Done.")
    return status


if __name__ == "__main__":
    sys.exit(main())
