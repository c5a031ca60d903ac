"""
Experiment orchestration: run a continual sequence from a data directory,
re-evaluate a finished run, and rebuild its report.

A run directory holds ``config.json``, ``accuracy_matrix.csv``,
``metrics.json``, ``history.json``, ``timing.json`` and one COSC checkpoint
per completed task under ``checkpoints/``.
"""

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .continual import (
    BufferStrategy,
    RehearsalBuffer,
    TrainConfig,
    evaluate_bags,
    run_sequence,
    with_scenario,
)
from .errors import FormatError, UsageError
from .metrics import AccuracyMatrix, RunReport, compute_metrics, silhouette
from .model import COSFormer, ModelConfig
from .numerics import no_grad
from .synthdata import Stream, oracle_accuracy, read_bags
from .tasks import Scenario
from .training_trace import TrainingTrace

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
MATRIX_FILE = "accuracy_matrix.csv"
METRICS_FILE = "metrics.json"
HISTORY_FILE = "history.json"
TIMING_FILE = "timing.json"
EMBEDDINGS_FILE = "embeddings.csv"
CHECKPOINT_DIR = "checkpoints"


@dataclass
class ExperimentConfig:
    """Everything a run needs besides the data itself."""

    data_dir: Path
    out_dir: Path
    train: TrainConfig = field(default_factory=TrainConfig)
    model: Optional[ModelConfig] = None
    order: Optional[list[int]] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "data_dir": str(self.data_dir),
            "order": self.order,
            "train": self.train.to_dict(),
            "model": None if self.model is None else self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], out_dir: Path) -> "ExperimentConfig":
        return cls(
            data_dir=Path(data["data_dir"]),
            out_dir=out_dir,
            train=TrainConfig.from_dict(data["train"]),
            model=None if data.get("model") is None else ModelConfig.from_dict(data["model"]),
            order=data.get("order"),
        )


def validate_variant(train: TrainConfig, model: ModelConfig) -> None:
    """Reject ablation flag combinations that have no meaning."""
    linear = model.head == "linear"
    if linear and train.use_woi:
        raise UsageError("WoI masking needs the word decoder; --linear-head has no words to mask")
    if train.scenario is Scenario.CLASS_IL:
        if not train.use_woi and not linear:
            raise UsageError("--no-woi only applies to task-il (class-il never masks)")
        if not train.use_task_for_ec:
            raise UsageError("--no-task-ec only applies to task-il (class-il has no task id)")


def parse_order(text: Optional[str]) -> Optional[list[int]]:
    if text is None or not text.strip():
        return None
    try:
        order = [int(part) for part in text.split(",")]
    except ValueError:
        raise UsageError(f"--order must be comma-separated task ids, got '{text}'") from None
    if len(set(order)) != len(order):
        raise UsageError(f"--order repeats a task id: {order}")
    return order


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path) -> Any:
    if not path.exists():
        raise FormatError(path, "file not found in run directory")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(path, f"invalid JSON: {e}") from e


def _model_config_for(stream: Stream, model: Optional[ModelConfig]) -> ModelConfig:
    if model is None:
        return ModelConfig(d_f=stream.config.d_f, d_text=stream.config.d_text)
    return replace(model, d_f=stream.config.d_f, d_text=stream.config.d_text)


def run_experiment(experiment: ExperimentConfig) -> RunReport:
    """Train the configured variant and write every run artifact."""
    started = time.perf_counter()
    stream = read_bags(experiment.data_dir)
    order = experiment.order if experiment.order is not None else list(range(len(stream.tasks)))
    if sorted(order) != list(range(len(stream.tasks))):
        raise UsageError(f"order {order} is not a permutation of the stream's tasks")
    model_config = _model_config_for(stream, experiment.model)
    train = experiment.train
    validate_variant(train, model_config)
    experiment = replace(experiment, model=model_config, order=order)

    out = experiment.out_dir
    (out / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    _write_json(out / CONFIG_FILE, experiment.to_dict())

    def save_stage(stage: int, model: COSFormer, buffer: RehearsalBuffer) -> None:
        save_checkpoint(checkpoint_path(out, stage), model, train, buffer, stage, train.seed)

    logger.info(
        "running %s, order %s, buffer %s", train.scenario.value, order, train.buffer_strategy.value
    )
    result = run_sequence(stream, order, train, model_config, on_stage=save_stage)

    result.matrix.write_csv(out / MATRIX_FILE)
    n_tasks = len(result.stream.tasks)
    oracle = [
        oracle_accuracy(result.stream, t, "test", train.scenario, seen_tasks=n_tasks)
        for t in range(n_tasks)
    ]
    report = RunReport.build(
        result.matrix,
        train.scenario.value,
        order,
        oracle,
        train.seed,
        {"model": model_config.to_dict(), "train": train.to_dict()},
    )
    _write_json(out / METRICS_FILE, report.to_dict())
    _write_json(out / HISTORY_FILE, result.trace.to_list())
    _write_json(out / TIMING_FILE, {"wall_clock_seconds": time.perf_counter() - started})
    return report


def checkpoint_path(run_dir: Path, stage: int) -> Path:
    return run_dir / CHECKPOINT_DIR / f"task_{stage}.cosc"


def final_checkpoint(run_dir: Path) -> Checkpoint:
    paths = sorted(
        (run_dir / CHECKPOINT_DIR).glob("task_*.cosc"),
        key=lambda p: int(p.stem.split("_")[1]),
    )
    if not paths:
        raise FormatError(run_dir / CHECKPOINT_DIR, "no checkpoints in run directory")
    return load_checkpoint(paths[-1])


def _run_stream(run_dir: Path) -> tuple[ExperimentConfig, Stream]:
    experiment = ExperimentConfig.from_dict(_read_json(run_dir / CONFIG_FILE), run_dir)
    stream = read_bags(experiment.data_dir)
    order = experiment.order or list(range(len(stream.tasks)))
    return experiment, stream.reordered(order)


def evaluate_run(run_dir: Union[str, Path], scenario: Union[str, Scenario]) -> dict[str, Any]:
    """Re-evaluate the final checkpoint on every test split under ``scenario``."""
    run_dir = Path(run_dir)
    scenario = Scenario.parse(scenario)
    _, stream = _run_stream(run_dir)
    checkpoint = final_checkpoint(run_dir)
    config = with_scenario(checkpoint.train_config, scenario)
    accuracies = [
        evaluate_bags(checkpoint.model, stream.bags_of(t.task_id, "test"), config)
        for t in checkpoint.model.tasks
    ]
    result = {
        "scenario": scenario.value,
        "stage": checkpoint.stage,
        "accuracies": accuracies,
        "average_accuracy": float(np.mean(accuracies)),
    }
    _write_json(run_dir / f"eval_{scenario.value}.json", result)
    return result


def embed_test_bags(checkpoint: Checkpoint, stream: Stream) -> list[tuple[int, int, int, np.ndarray]]:
    """(bag id, task, class, head-input embedding) for every test bag."""
    model, config = checkpoint.model, checkpoint.train_config
    rows = []
    with no_grad():
        for task in model.tasks:
            for bag in stream.bags_of(task.task_id, "test"):
                target = model.ec_target(
                    bag.task_id if config.task_known else None, config.use_task_for_ec
                )
                memory = model.memory(bag.patches, target, config.gamma, config.beta)
                rows.append((bag.bag_id, bag.task_id, bag.class_id, model.embedding(memory)))
    return rows


def write_embeddings(path: Path, rows: list[tuple[int, int, int, np.ndarray]]) -> None:
    width = len(rows[0][3]) if rows else 0
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["bag_id", "task", "class"] + [f"e{i}" for i in range(width)])
        for bag_id, task, cls, vector in rows:
            writer.writerow([bag_id, task, cls] + [repr(float(v)) for v in vector])


def report_run(run_dir: Union[str, Path], emit_embeddings: bool = False) -> RunReport:
    """Recompute metrics from the emitted matrix; optionally add the silhouette."""
    run_dir = Path(run_dir)
    matrix = AccuracyMatrix.read_csv(run_dir / MATRIX_FILE)
    report = RunReport.from_dict(_read_json(run_dir / METRICS_FILE))
    metrics = compute_metrics(matrix)
    report.final_accuracies = metrics.final_accuracies
    report.average_accuracy = metrics.average_accuracy
    report.forgetting = metrics.forgetting
    if emit_embeddings:
        _, stream = _run_stream(run_dir)
        rows = embed_test_bags(final_checkpoint(run_dir), stream)
        write_embeddings(run_dir / EMBEDDINGS_FILE, rows)
        tasks = np.array([task for _, task, _, _ in rows])
        if len(np.unique(tasks)) >= 2:
            report.silhouette = silhouette(np.stack([r[3] for r in rows]), tasks)
        else:
            logger.warning("silhouette needs two tasks; run has %d", len(np.unique(tasks)))
    _write_json(run_dir / METRICS_FILE, report.to_dict())
    return report


def buffer_strategy_names() -> list[str]:
    return [s.value for s in BufferStrategy]


def load_history(run_dir: Union[str, Path]) -> TrainingTrace:
    return TrainingTrace.from_list(_read_json(Path(run_dir) / HISTORY_FILE))
