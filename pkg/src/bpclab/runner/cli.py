"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration or input, 3 invariant failure,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

from .. import metrics
from ..errors import DivergenceError, InvalidInputError, InvariantViolation
from . import experiments
from .config import RunConfig
from .io import atomic_write_json, atomic_write_text

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_DIVERGENCE = 4

SUBCOMMANDS = {
    "train": "train",
    "drift": "drift",
    "contaminate": "contamination",
    "confatk": "confat_k",
    "gradcheck": "gradcheck",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InvalidInputError(message)


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--seeds", type=_int_list, help="comma-separated run seeds (default 0,1,2,3,4)")
    p.add_argument("--out", type=Path, help="base directory for run directories (default run/)")
    p.add_argument("--bins", type=int, help="number of ECE bins (default 20)")
    p.add_argument("--lambda", dest="lam", type=float, help="calibration weight (default 0.1)")
    p.add_argument("--beta", type=float, help="DPO temperature (default 0.1)")
    p.add_argument("--k", type=_int_list, help="candidate counts for Confidence@k (default 4,8)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bpclab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "train every method branch and save checkpoints",
        "drift": "SFT -> DPO / DPO+BCE / DPO+BPC calibration drift experiment",
        "contaminate": "mean versus median under contamination",
        "confatk": "Confidence@k selection experiment",
        "gradcheck": "finite-difference gradient and bound suite",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text))
    e = sub.add_parser("ece", help="calibration metrics for a prediction-record CSV")
    e.add_argument("records", type=Path)
    e.add_argument("--bins", type=int, default=metrics.DEFAULT_BINS)
    e.add_argument("--out", type=Path, help="directory for reliability and summary tables")
    r = sub.add_parser("report", help="re-render summary tables from a run directory")
    r.add_argument("run_dir", type=Path)
    return parser


def resolve_config(args, experiment: str) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig(experiment=experiment)
    if args.config and cfg.experiment != experiment:
        raise InvalidInputError(f"config is for {cfg.experiment!r}, not {experiment!r}")
    over = {}
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.seeds is not None:
        over["seeds"] = args.seeds
    if args.out is not None:
        over["output_dir"] = str(args.out)
    if args.bins is not None:
        over["bins"] = args.bins
    tc = {}
    if args.lam is not None:
        tc["lam"] = args.lam
    if args.beta is not None:
        tc["beta"] = args.beta
    if tc:
        over["train_config"] = dataclasses.replace(cfg.train_config, **tc)
    if args.k is not None:
        over["selection"] = dataclasses.replace(cfg.selection, ks=args.k)
    return cfg.replace(**over) if over else cfg


def _print_csv(path: Path) -> None:
    print(f"== {path.name}")
    for row in csv.reader(io.StringIO(path.read_text())):
        print("  ".join(row))


def cmd_ece(args) -> int:
    recs = metrics.read_records_csv(args.records)
    batch = metrics.as_batch(recs)
    rel = metrics.reliability_diagram(batch, args.bins)
    s = metrics.summarize(batch, args.bins)
    summary = {k: v for k, v in dataclasses.asdict(s).items()}
    summary["num_records"] = len(batch)
    summary["bins"] = args.bins
    print(json.dumps(summary, indent=1))
    if args.out:
        atomic_write_text(args.out / "reliability.csv", metrics.reliability_to_csv(rel))
        atomic_write_json(args.out / "reliability.json", rel.rows())
        keys = list(summary)
        atomic_write_text(args.out / "summary.csv", experiments.table_csv(keys, [[summary[k] for k in keys]]))
        atomic_write_json(args.out / "summary.json", summary)
    return EXIT_OK


def cmd_report(args) -> int:
    reports = args.run_dir / "reports"
    if not reports.is_dir():
        raise InvalidInputError(f"{args.run_dir} is not a run directory")
    per_seed = reports / "drift_per_seed.csv"
    if per_seed.exists():
        rows = []
        for r in csv.DictReader(io.StringIO(per_seed.read_text())):
            rows.append(
                [r["method"], int(r["seed"])]
                + [float(r[f]) for f in ("accuracy", "exact_ece", "binned_ece", "mean_confidence")]
            )
        summary = experiments.summarize_drift(rows)
        atomic_write_text(reports / "drift_summary.csv", experiments.table_csv(experiments.SUMMARY_FIELDS, summary))
        atomic_write_json(
            reports / "drift_summary.json",
            [dict(zip(experiments.SUMMARY_FIELDS, map(experiments._jsonable, r))) for r in summary],
        )
    shown = sorted(p for p in reports.glob("*.csv") if not p.name.startswith(("reliability_", "records_", "selection_seed")))
    for p in shown:
        _print_csv(p)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "ece":
            return cmd_ece(args)
        if args.command == "report":
            return cmd_report(args)
        cfg = resolve_config(args, SUBCOMMANDS[args.command])
        root = experiments.run_experiment(cfg)
        print(root)
        return EXIT_OK
    except InvariantViolation as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (InvalidInputError, FileNotFoundError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
