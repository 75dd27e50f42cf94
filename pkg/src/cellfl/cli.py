"""Command-line runner: ``cellfl run --config <path> [--out <dir>] [--seed <u64>]``.

Exit codes: 0 success, 1 usage/config error, 2 I/O or dataset format error,
3 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .comms import CommLedger
from .config import ExperimentConfig, parse_config
from .errors import NumericDivergence, UsageError
from .nn import FlatModel
from .protocols import MetricsTable, run_experiment

logger = logging.getLogger("cellfl")

METRICS_HEADER = ["round", "acc_mean", "ul_bytes", "dl_bytes", "cum_bytes", "sparsity_mean", "pruners"]
LEDGER_HEADER = [
    "round", "protocol", "ul_bytes", "dl_bytes", "ul_messages", "dl_messages",
    "cum_ul_bytes", "cum_dl_bytes", "cum_bytes",
]

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    # repr is locale-independent and round-trips exactly
    return repr(float(x))


def metrics_csv(metrics: MetricsTable) -> str:
    rows = [
        [r.round, _fmt(r.acc_mean), r.ul_bytes, r.dl_bytes, r.cum_bytes, _fmt(r.sparsity_mean), r.pruners]
        for r in metrics.rows
    ]
    return _csv_text(METRICS_HEADER, rows)


def ledger_csv(ledger: CommLedger) -> str:
    rows = [
        [r.round, r.protocol, r.ul_bytes, r.dl_bytes, r.ul_messages, r.dl_messages,
         r.cum_ul_bytes, r.cum_dl_bytes, r.cum_bytes]
        for r in ledger.rows
    ]
    return _csv_text(LEDGER_HEADER, rows)


def emit_outputs(
    metrics: MetricsTable,
    ledger: CommLedger,
    out_dir: str | Path,
    config: ExperimentConfig | None = None,
    init_model: FlatModel | None = None,
) -> list[Path]:
    """Write metrics.csv, ledger.csv, config.json and init_model.npz; overwrites."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in (("metrics.csv", metrics_csv(metrics)), ("ledger.csv", ledger_csv(ledger))):
        path = out / name
        path.write_text(text, encoding="utf-8", newline="\n")
        written.append(path)
    if config is not None:
        path = out / "config.json"
        path.write_text(config.to_json(), encoding="utf-8", newline="\n")
        written.append(path)
    if init_model is not None:
        path = out / "init_model.npz"
        np.savez(path, weights=init_model.weights, biases=init_model.biases)
        written.append(path)
    return written


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment from a JSON config")
    run.add_argument("--config", required=True, help="path to the JSON config file")
    run.add_argument("--out", help="output directory (overrides out_dir)")
    run.add_argument("--seed", type=int, help="master seed (overrides seed)")
    return parser


def run_command(config_path: str, out: str | None = None, seed: int | None = None) -> ExperimentConfig:
    cfg = parse_config(config_path)
    if out is not None:
        cfg.out_dir = out
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    result = run_experiment(cfg)
    emit_outputs(result.metrics, result.ledger, cfg.out_dir, cfg, result.global_state.init_model)
    if result.metrics.rows:
        last = result.metrics.rows[-1]
        logger.info(
            "%s: %d rounds, final mean accuracy %.4f, cumulative %.3f MB -> %s",
            cfg.protocol, cfg.rounds, last.acc_mean, last.cum_bytes / 1e6, cfg.out_dir,
        )
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run_command(args.config, args.out, args.seed)
    except UsageError as exc:
        print(f"cellfl: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cellfl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericDivergence as exc:
        print(f"cellfl: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
