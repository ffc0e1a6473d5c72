"""Command line: ``voltchain run``, ``voltchain verify`` and ``voltchain replay``."""
from __future__ import annotations

import argparse
import logging
import sys

from voltchain.harness.reports import emit_reports, write_ledger_traces
from voltchain.harness.runner import ReplicaDivergence, replay_traces, run_simulation
from voltchain.harness.scenario import ScenarioError, load_scenario
from voltchain.ledger import ChainParseError, LedgerError, parse_chain, verify_chain

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


def _run(args) -> int:
    try:
        cfg = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.bid_weighting is not None:
        overrides["bid_weighting"] = args.bid_weighting
    if args.steps is not None:
        overrides["steps"] = args.steps
    try:
        report = run_simulation(cfg, **overrides)
    except (ReplicaDivergence, LedgerError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    emit_reports(report, args.out)
    if not args.no_figures:
        from voltchain.harness.plotting import render_figures
        render_figures(report, args.out)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {len(report.chain)} blocks and {len(report.contracts)} contracts to {args.out}")
    return EXIT_OK


def _load_chain(path):
    """Parsed chain, or None after reporting why the file could not be read."""
    try:
        with open(path, encoding="ascii") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return None
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None
    try:
        return parse_chain(text)
    except ChainParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return None


def _verify(args) -> int:
    chain = _load_chain(args.chain)
    if chain is None:
        return EXIT_CONFIG
    bad = verify_chain(chain)
    if bad is not None:
        print(f"bad block {bad}")
        return EXIT_INVARIANT
    print(f"ok ({len(chain)} blocks)")
    return EXIT_OK


def _replay(args) -> int:
    chain = _load_chain(args.chain)
    if chain is None:
        return EXIT_CONFIG
    try:
        reputation, wallets = replay_traces(chain)
    except LedgerError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    write_ledger_traces(args.out, reputation, wallets)
    print(f"replayed {len(chain)} blocks into {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voltchain")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="simulate a scenario and write reports")
    run.add_argument("--scenario", required=True, help="scenario JSON path or bundled name")
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--bid-weighting", choices=("divide", "multiply"))
    run.add_argument("--steps", type=int)
    run.add_argument("--no-figures", action="store_true")
    run.set_defaults(func=_run)
    ver = sub.add_parser("verify", help="check a chain.log")
    ver.add_argument("--chain", required=True)
    ver.set_defaults(func=_verify)
    rep = sub.add_parser("replay", help="rebuild reputation.csv and wallets.csv from a chain.log")
    rep.add_argument("--chain", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
