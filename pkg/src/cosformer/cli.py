"""
COSFormer command-line interface.

Subcommands generate synthetic streams, train continual runs (with the
ablation switches), re-evaluate finished runs and rebuild their reports.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional

from . import __version__
from .continual import TrainConfig
from .errors import CosformerError, UsageError
from .harness import (
    ExperimentConfig,
    buffer_strategy_names,
    evaluate_run,
    load_history,
    parse_order,
    report_run,
    run_experiment,
)
from .model import ModelConfig
from .synthdata import StreamConfig, load_stream_config, make_stream, write_bags

logger = logging.getLogger(__name__)

SCENARIOS = ["task-il", "class-il"]


def create_argument_parser() -> argparse.ArgumentParser:
    """Create and configure the argument parser."""
    parser = argparse.ArgumentParser(
        prog="cosformer",
        description="COSFormer - continual slide-level learning with expert consultation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate a three-task synthetic stream
  cosformer generate --config stream.json --out data/ --seed 1

  # Train the full model under task-il, then under class-il
  cosformer train --data data/ --scenario task-il --out runs/full
  cosformer train --data data/ --scenario class-il --out runs/full-cil

  # Ablations
  cosformer train --data data/ --scenario class-il --buffer none --out runs/nobuf
  cosformer train --data data/ --scenario task-il --no-ec --linear-head --out runs/lin
  cosformer train --data data/ --scenario task-il --no-woi --out runs/nowoi
  cosformer train --data data/ --order 2,1,0 --out runs/reverse

  # Re-evaluate and report
  cosformer eval --run runs/full --scenario class-il
  cosformer report --run runs/full --emit-embeddings
        """,
    )
    parser.add_argument("--version", action="version", version=f"cosformer {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    parser.add_argument("--debug", action="store_true", help="Re-raise errors with traceback")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="Generate a synthetic task stream")
    generate.add_argument("--config", type=Path, help="Stream configuration JSON")
    generate.add_argument("--out", type=Path, required=True, help="Output data directory")
    generate.add_argument("--seed", type=int, help="Seed (overrides the config file)")

    train = commands.add_parser("train", help="Train a continual run")
    train.add_argument("--data", type=Path, required=True, help="Data directory")
    train.add_argument("--out", type=Path, required=True, help="Run directory")
    train.add_argument("--scenario", choices=SCENARIOS, default="task-il")
    train.add_argument("--order", help="Comma-separated task order (default 0,1,...)")
    train.add_argument(
        "--buffer", choices=buffer_strategy_names(), default="text-retrieval",
        help="Rehearsal buffer strategy",
    )
    train.add_argument("--buf-size", type=int, default=26, help="Buffer capacity")
    train.add_argument("--gamma", type=float, default=5.0, help="Target-task logit scale")
    train.add_argument("--beta", type=float, default=1.0, help="Target-task weight shift")
    train.add_argument("--clusters", type=int, default=2, help="Clusters per class")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    train.add_argument("--epochs", type=int, default=50, help="Maximum epochs per task")
    train.add_argument("--patience", type=int, default=5, help="Early-stopping patience")
    train.add_argument("--batch-size", type=int, default=1, help="Bags per step")
    train.add_argument(
        "--slide-distance", choices=["mean", "chamfer"], default="mean",
        help="Slide distance used to cluster buffer candidates",
    )
    train.add_argument("--no-ec", action="store_true", help="Single shared projection")
    train.add_argument("--linear-head", action="store_true", help="Linear head, no decoder")
    train.add_argument("--no-task-ec", action="store_true", help="Hide task id from EC")
    train.add_argument("--no-woi", action="store_true", help="Decode without WoI mask")
    train.add_argument("--ec-form", choices=["softmax", "literal"], default="softmax")
    train.add_argument("--published", action="store_true", help="Published width and learning rate")
    train.add_argument("--progress", action="store_true", help="Show progress bars")
    train.add_argument("--trace", action="store_true", help="Print the training trace")

    evaluate = commands.add_parser("eval", help="Re-evaluate a finished run")
    evaluate.add_argument("--run", type=Path, required=True, help="Run directory")
    evaluate.add_argument("--scenario", choices=SCENARIOS, required=True)

    report = commands.add_parser("report", help="Recompute a run's report")
    report.add_argument("--run", type=Path, required=True, help="Run directory")
    report.add_argument(
        "--emit-embeddings", action="store_true",
        help="Write embeddings.csv and the silhouette score",
    )
    return parser


def handle_generate(args: argparse.Namespace) -> None:
    config = load_stream_config(args.config) if args.config else StreamConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    stream = make_stream(config)
    manifest = write_bags(stream, args.out)
    print(f"Wrote {len(stream.bags)} bags over {len(stream.tasks)} tasks to {manifest}")


def build_experiment(args: argparse.Namespace) -> ExperimentConfig:
    model_fields: dict[str, Any] = {
        "expert_consultation": not args.no_ec,
        "head": "linear" if args.linear_head else "decoder",
        "ec_form": args.ec_form,
    }
    model = ModelConfig.published(**model_fields) if args.published else ModelConfig(**model_fields)
    train_fields: dict[str, Any] = {
        "scenario": args.scenario,
        "learning_rate": args.lr,
        "max_epochs": args.epochs,
        "patience": args.patience,
        "gamma": args.gamma,
        "beta": args.beta,
        "buffer_size": args.buf_size,
        "n_clusters": args.clusters,
        "batch_size": args.batch_size,
        "buffer_strategy": args.buffer,
        "slide_distance": args.slide_distance,
        "use_task_for_ec": not args.no_task_ec,
        # a linear head has no decoder, so it never masks
        "use_woi": not (args.no_woi or args.linear_head),
        "seed": args.seed,
        "progress": args.progress,
    }
    if args.published:
        train_fields["learning_rate"] = TrainConfig.published().learning_rate
    return ExperimentConfig(
        data_dir=args.data,
        out_dir=args.out,
        train=TrainConfig(**train_fields),
        model=model,
        order=parse_order(args.order),
    )


def handle_train(args: argparse.Namespace) -> None:
    report = run_experiment(build_experiment(args))
    print(f"Scenario: {report.scenario}  order: {','.join(map(str, report.order))}")
    for task, accuracy in enumerate(report.final_accuracies):
        oracle = report.oracle_accuracies[task]
        print(f"  task {task}: accuracy {accuracy:.4f}  (oracle {oracle:.4f})")
    print(f"Average accuracy: {report.average_accuracy:.4f}")
    if report.forgetting:
        print("Forgetting: " + ", ".join(f"{f:.4f}" for f in report.forgetting))
    if args.trace:
        load_history(args.out).print_trace()


def handle_eval(args: argparse.Namespace) -> None:
    result = evaluate_run(args.run, args.scenario)
    print(f"Scenario: {result['scenario']} (checkpoint after task {result['stage']})")
    for task, accuracy in enumerate(result["accuracies"]):
        print(f"  task {task}: accuracy {accuracy:.4f}")
    print(f"Average accuracy: {result['average_accuracy']:.4f}")


def handle_report(args: argparse.Namespace) -> None:
    report = report_run(args.run, emit_embeddings=args.emit_embeddings)
    print(f"Average accuracy: {report.average_accuracy:.4f}")
    for task, value in enumerate(report.forgetting):
        print(f"  forgetting task {task}: {value:.4f}")
    if report.silhouette is not None:
        print(f"Silhouette: {report.silhouette:.4f}")


HANDLERS = {
    "generate": handle_generate,
    "train": handle_train,
    "eval": handle_eval,
    "report": handle_report,
}


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
    )
    if not verbose:
        logging.getLogger("cosformer.harness").setLevel(logging.INFO)


def main(argv: Optional[list[str]] = None) -> None:
    """Main CLI entry point."""
    parser = create_argument_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    try:
        HANDLERS[args.command](args)
    except UsageError as e:
        if args.debug:
            raise
        print(f"Usage error: {e}", file=sys.stderr)
        sys.exit(2)
    except (CosformerError, OSError) as e:
        if args.debug:
            raise
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)
