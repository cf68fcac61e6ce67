"""Command line: ``pc-lab {compare,trace,bench,train,check}``.

Exit codes: 0 success, 1 check failure, 2 config error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import logging
import sys
from pathlib import Path

from . import experiments, plotting
from .chain import NumericOverflowError
from .config import ConfigError, load_config
from .engines import DivergenceError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("pc_lab")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_csv(cfg, columns, rows) -> str:
    """CSV text: '#'-prefixed provenance lines, then the header row, then data."""
    buf = io.StringIO()
    buf.write(f"# config_sha256: {cfg.digest()}\n")
    buf.write(f"# seed: {cfg.seed}\n")
    buf.write(f"# config: {cfg.canonical_json()}\n")
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _emit(args, cfg, columns, rows, plot=None):
    text = render_csv(cfg, columns, rows)
    out = args.out or cfg.output
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    if plot is not None and not args.no_figures and rows:
        plot(rows, path.with_suffix(".png"))


def _threads(args):
    if not args.threads:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=args.threads)


def cmd_compare(args, cfg):
    _emit(args, cfg, experiments.COMPARE_COLUMNS, experiments.compare_rows(cfg),
          plotting.plot_compare)
    return EXIT_OK


def cmd_trace(args, cfg):
    rows = experiments.trace_rows(cfg, zero_loss=args.zero_loss)
    for w in {r["warning"] for r in rows if r["warning"]}:
        log.warning(w)
    _emit(args, cfg, experiments.TRACE_COLUMNS, rows, plotting.plot_trace)
    return EXIT_OK


def cmd_bench(args, cfg):
    rows = experiments.bench_rows(cfg, threads=args.threads or None)
    _emit(args, cfg, experiments.BENCH_COLUMNS, rows, plotting.plot_bench)
    return EXIT_OK


def cmd_train(args, cfg):
    rows, diverged = experiments.train_rows(cfg)
    _emit(args, cfg, experiments.TRAIN_COLUMNS, rows, plotting.plot_train)
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_check(args, cfg):
    results = experiments.run_checks(cfg, fault=args.inject_fault)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {
    "compare": (cmd_compare, "cosine of FPA-PC updates to backprop over a step sweep"),
    "trace": (cmd_trace, "first inference step at which each layer's error is nonzero"),
    "bench": (cmd_bench, "modeled and measured cost of backprop, FPA-PC and Z-IL"),
    "train": (cmd_train, "train with one or more engines and log accuracies"),
    "check": (cmd_check, "run the invariant suite and report pass/fail per check"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pc-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="CSV output path (stdout if omitted)")
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS threads; 1 gives bit-reproducible output, 0 leaves the default")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--no-figures", action="store_true", help="skip the PNG next to the CSV")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "trace":
            p.add_argument("--zero-loss", action="store_true",
                           help="use targets equal to the network output")
        if name == "check":
            p.add_argument("--inject-fault", choices=["pc-vjp-sign"], help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 0:
        print("error: --threads must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
        fn = COMMANDS[args.command][0]
        with _threads(args):
            return fn(args, cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericOverflowError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
