"""Command-line entry points: train, eval, gradcheck, export.

Exit codes: 0 success, 1 contract/config errors, 2 numeric failures
(non-finite losses, gradient checks out of tolerance).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import DatasetSpec, load_config, _build_section
from .errors import (
    ConfigError,
    ContractError,
    InsufficientQueueError,
    MetricUnavailableError,
    NumericError,
    ShapeError,
)

GRADCHECK_TOLERANCE = 1e-4


def _parse_dataset_spec(raw: str) -> DatasetSpec:
    """Accept either a path to a JSON file or an inline JSON object."""
    if os.path.exists(raw):
        with open(raw, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError:
            raise ConfigError(f"dataset spec is neither a file nor inline JSON: {raw!r}")
    spec = _build_section(DatasetSpec, doc, "dataset")
    spec.validate()
    return spec


def _cmd_train(args) -> int:
    from .training import run_training

    cfg = load_config(args.config)
    if args.out is not None:
        cfg.out_dir = args.out
    metrics_path, ckpt_path = run_training(cfg)
    print(f"metrics: {metrics_path}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import evaluate_checkpoint, write_probe_report

    dataset = _parse_dataset_spec(args.dataset) if args.dataset else None
    report = evaluate_checkpoint(args.checkpoint, dataset, k=args.k)
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", "probe_report.json")
    write_probe_report(report, out)
    print(f"knn_top1: {report.knn_top1:.4f}")
    print(f"linear_top1: {report.linear_top1:.4f}")
    print(f"nn_retrieval_top1: {report.nn_retrieval_top1:.4f}")
    print(f"report: {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import MODULE_CHECKS, run_all

    results = run_all()
    if args.module is not None:
        if args.module not in MODULE_CHECKS:
            raise ConfigError(
                f"unknown module {args.module!r}; choose from {sorted(MODULE_CHECKS)}"
            )
        results = {k: results[k] for k in MODULE_CHECKS[args.module]}
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:28s} max_rel_err={err:.3e}  {status}")
        worst = max(worst, err)
    if worst > GRADCHECK_TOLERANCE:
        print(f"gradient check failed: worst {worst:.3e} > {GRADCHECK_TOLERANCE:.0e}")
        return 2
    return 0


def _cmd_export(args) -> int:
    from .evaluation import export_embeddings

    dataset = _parse_dataset_spec(args.dataset) if args.dataset else None
    rows = export_embeddings(args.checkpoint, args.out, dataset, source=args.source)
    print(f"wrote {rows} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tricontrast",
        description="Desk-scale neighbour/centroid/feature contrastive training",
    )
    sub = parser.add_subparsers(dest="command")

    p_train = sub.add_parser("train", help="run the training loop from a JSON config")
    p_train.add_argument("--config", required=True, help="path to a TrainConfig JSON document")
    p_train.add_argument("--out", default=None, help="override the config's output directory")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="probe a checkpoint with kNN and linear classifiers")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", default=None, help="dataset spec JSON (file or inline)")
    p_eval.add_argument("--k", type=int, default=5)
    p_eval.add_argument("--out", default=None, help="probe report path")
    p_eval.set_defaults(func=_cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--module", default=None, help="restrict to one module's checks")
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_export = sub.add_parser("export", help="dump embeddings to CSV")
    p_export.add_argument("--checkpoint", required=True)
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--dataset", default=None)
    p_export.add_argument("--source", choices=["projector", "encoder"], default="projector")
    p_export.set_defaults(func=_cmd_export)
    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; contract errors map to 1 here
        return 0 if exc.code == 0 else 1
    if getattr(args, "func", None) is None:
        parser.print_usage()
        return 1
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError, InsufficientQueueError,
            MetricUnavailableError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())
