"""Command-line entry points.

Subcommands: gen-sbm, split, run-attack, run-baseline, fit-bound, report.
Exit codes: 0 success, 2 config error, 3 data error, 4 phase failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import graph, model, pipeline
from .errors import ConfigError, DataError, PhaseError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="propinf",
                                     description="Graph property inference experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-sbm", help="generate a synthetic attributed graph")
    p.add_argument("--blocks", required=True, help="comma-separated block sizes, e.g. 200,200")
    p.add_argument("--p-in", type=float, required=True)
    p.add_argument("--p-out", type=float, required=True)
    p.add_argument("--attr-fracs", required=True, help="per-block fraction of attr=1 nodes")
    p.add_argument("--feature-noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output file prefix")

    p = sub.add_parser("split", help="split a graph into auxiliary and target-pool halves")
    p.add_argument("--graph", required=True, help="input file prefix")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-aux", required=True)
    p.add_argument("--out-target", required=True)

    for name, help_text in (("run-attack", "run the approximation attack"),
                            ("run-baseline", "run the shadow-training baseline")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True, help="report JSON path")
        p.add_argument("--csv", help="also append a summary row here")

    p = sub.add_parser("fit-bound", help="fit the error-bound constant on one reference")
    p.add_argument("--config", required=True)
    p.add_argument("--perturbations", type=int, default=50)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="summarize report JSONs into a CSV table")
    p.add_argument("--csv", required=True)
    p.add_argument("reports", nargs="+", help="report JSON files")
    return parser


def _cmd_gen_sbm(args) -> int:
    blocks = [int(x) for x in args.blocks.split(",") if x]
    fracs = [float(x) for x in args.attr_fracs.split(",") if x]
    g = graph.generate_sbm(blocks, args.p_in, args.p_out, fracs,
                           args.feature_noise, args.seed)
    graph.save_graph(g, args.out)
    print(f"wrote {g.node_count} nodes, {len(g.edges)} edges to {args.out}.*")
    return 0


def _cmd_split(args) -> int:
    g = graph.load_graph(args.graph)
    aux, pool = graph.split_target_auxiliary(g, args.seed)
    graph.save_graph(aux, args.out_aux)
    graph.save_graph(pool, args.out_target)
    print(f"auxiliary: {aux.node_count} nodes; target pool: {pool.node_count} nodes")
    return 0


def _cmd_run(args, baseline: bool) -> int:
    cfg = pipeline.load_config(args.config)
    runner = pipeline.run_shadow_baseline if baseline else pipeline.run_attack
    report = runner(cfg)
    pipeline.emit_report(report, "json", args.out)
    if args.csv:
        pipeline.emit_report(report, "csv-summary", args.csv)
    m = report.metrics
    print(f"{report.experiment}: accuracy={m.accuracy:.3f} roc_auc={m.roc_auc:.3f} "
          f"runtime={report.runtime['total_ms']:.0f}ms")
    return 0


def _cmd_fit_bound(args) -> int:
    cfg = pipeline.load_config(args.config)
    fixture = pipeline.build_fixture(cfg)
    part = graph.louvain_partition(fixture.aux, seed=[cfg.seed, 2])
    wc = graph.WalkConfig(w=cfg.sampling.walk_weight,
                          target_size=cfg.sampling.reference_size,
                          seed=[cfg.seed, 3, 0])
    ref = graph.sample_reference_graph(fixture.aux, part, wc, start_community=0)
    theta_ref = model.train(ref, cfg=cfg.model.train_config())
    fit = pipeline.fit_bound_constant(ref, theta_ref, args.perturbations,
                                      cfg.seed, cfg.model.cg_config())
    with open(args.out, "w") as fh:
        json.dump(fit, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"C_hat={fit['C_hat']:.4g} spearman_rho={fit['spearman_rho']:.3f}")
    return 0


def _cmd_report(args) -> int:
    import csv as csv_mod
    import os
    new = not os.path.exists(args.csv) or os.path.getsize(args.csv) == 0
    with open(args.csv, "a", newline="") as fh:
        writer = csv_mod.writer(fh)
        if new:
            writer.writerow(pipeline.CSV_COLUMNS)
        for path in args.reports:
            with open(path) as rf:
                data = json.load(rf)
            writer.writerow([
                data["experiment"],
                data["config"]["attack"]["knowledge"],
                data["config"]["property_spec"]["kind"],
                data["config"]["seed"],
                data["counts"]["models_trained"],
                data["counts"]["models_approximated"],
                data["counts"]["targets"],
                f"{data['metrics']['accuracy']:.6f}",
                f"{data['metrics']['roc_auc']:.6f}",
                f"{data['runtime']['total_ms']:.3f}",
                f"{data['runtime']['phases']['training']:.3f}",
                f"{data['runtime']['phases']['approximation']:.3f}",
            ])
    print(f"appended {len(args.reports)} row(s) to {args.csv}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen-sbm":
            return _cmd_gen_sbm(args)
        if args.command == "split":
            return _cmd_split(args)
        if args.command == "run-attack":
            return _cmd_run(args, baseline=False)
        if args.command == "run-baseline":
            return _cmd_run(args, baseline=True)
        if args.command == "fit-bound":
            return _cmd_fit_bound(args)
        if args.command == "report":
            return _cmd_report(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error [{exc.code}]: {exc}", file=sys.stderr)
        return 3
    except PhaseError as exc:
        print(f"phase failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
