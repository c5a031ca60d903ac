"""
Task lifecycle for continual training.

A task is registered (new expert, router column, label words and head rows),
past experts are frozen, the model is trained on the task with rehearsal of
buffered past bags, and representative bags of the task are then written to
the rehearsal buffer together with logit snapshots of the just-trained model.
"""

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Optional, Protocol, Union

import numpy as np
from tqdm import tqdm

from .clustering import SLIDE_DISTANCES, cluster_slides
from .errors import ContractViolation
from .metrics import AccuracyMatrix
from .model import (
    COSFormer,
    ModelConfig,
    TextEncoder,
    classify_decoded,
    greedy_decode,
    predict_class,
)
from .numerics import Tensor, cross_entropy, mse, named_rng, no_grad
from .optim import Adam
from .synthdata import BagRecord, Stream, TextStub
from .tasks import Scenario, TaskSpec
from .training_trace import EpochRecord, StopReason, TaskTrace, TrainingTrace

logger = logging.getLogger(__name__)


class BufferStrategy(Enum):
    """How past bags are chosen for rehearsal."""

    TEXT_RETRIEVAL = "text-retrieval"
    RESERVOIR = "reservoir"
    RANDOM = "random"
    NONE = "none"

    @classmethod
    def parse(cls, value: Union[str, "BufferStrategy"]) -> "BufferStrategy":
        if isinstance(value, BufferStrategy):
            return value
        for strategy in cls:
            if strategy.value == value.strip().lower():
                return strategy
        names = ", ".join(s.value for s in cls)
        raise ContractViolation(f"Unknown buffer strategy: {value}. Must be one of {names}.")


@dataclass
class TrainConfig:
    """Optimisation, rehearsal and evaluation settings of a continual run."""

    scenario: Scenario = Scenario.TASK_IL
    learning_rate: float = 1e-3
    max_epochs: int = 50
    patience: int = 5
    gamma: float = 5.0
    beta: float = 1.0
    buffer_size: int = 26
    n_clusters: int = 2
    batch_size: int = 1
    replay_size: Optional[int] = None
    buffer_strategy: BufferStrategy = BufferStrategy.TEXT_RETRIEVAL
    slide_distance: str = "mean"
    use_task_for_ec: bool = True
    use_woi: bool = True
    seed: int = 0
    progress: bool = False

    def __post_init__(self) -> None:
        self.scenario = Scenario.parse(self.scenario)
        self.buffer_strategy = BufferStrategy.parse(self.buffer_strategy)
        if self.scenario is Scenario.CLASS_IL:
            # no task identity: consultation must not lean on any expert
            self.gamma, self.beta = 1.0, 0.0
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        if self.max_epochs < 1 or self.patience < 1:
            raise ContractViolation("max_epochs and patience must be >= 1")
        if self.batch_size < 1 or self.n_clusters < 1:
            raise ContractViolation("batch_size and n_clusters must be >= 1")
        if self.buffer_size < 0:
            raise ContractViolation("buffer_size must be >= 0")
        if self.replay_size is not None and self.replay_size < 0:
            raise ContractViolation("replay_size must be >= 0")
        if self.slide_distance not in SLIDE_DISTANCES:
            raise ContractViolation(f"slide_distance must be one of {SLIDE_DISTANCES}")

    @property
    def effective_replay_size(self) -> int:
        return self.batch_size if self.replay_size is None else self.replay_size

    @property
    def task_known(self) -> bool:
        return self.scenario is Scenario.TASK_IL

    @classmethod
    def published(cls, **overrides: Any) -> "TrainConfig":
        """Published optimiser settings."""
        return cls(**{"learning_rate": 1e-5, **overrides})

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["scenario"] = self.scenario.value
        data["buffer_strategy"] = self.buffer_strategy.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


class ClassTextEncoder(TextEncoder, Protocol):
    def embed_class(self, name: str) -> np.ndarray: ...


class LabelledBag(Protocol):
    task_id: int
    class_id: int
    patches: np.ndarray


# ---------------------------------------------------------------------------
# Rehearsal buffer
# ---------------------------------------------------------------------------


@dataclass
class BufferEntry:
    """A stored past bag with the logits its source model gave it."""

    bag_id: int
    task_id: int
    class_id: int
    patches: np.ndarray
    label: tuple[int, ...]
    snapshot: Optional[np.ndarray] = None
    score: Optional[float] = None


@dataclass
class RehearsalBuffer:
    capacity: int = 26
    entries: list[BufferEntry] = field(default_factory=list)
    seen: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def bag_ids(self) -> list[int]:
        return [e.bag_id for e in self.entries]

    def enforce_capacity(self, rng: np.random.Generator) -> list[BufferEntry]:
        """Delete uniformly random entries until the buffer fits; return them."""
        removed = []
        while len(self.entries) > self.capacity:
            removed.append(self.entries.pop(int(rng.integers(len(self.entries)))))
        return removed

    def sample(self, k: int, rng: np.random.Generator) -> list[BufferEntry]:
        """k entries drawn uniformly without replacement."""
        k = min(k, len(self.entries))
        if k == 0:
            return []
        return [self.entries[i] for i in rng.choice(len(self.entries), size=k, replace=False)]


# ---------------------------------------------------------------------------
# Lifecycle
# ---------------------------------------------------------------------------


def register_task(model: COSFormer, spec: TaskSpec) -> COSFormer:
    new_ids = model.add_task(spec)
    logger.info(
        "registered task %d (%s): %d new words, vocabulary %d, experts %d",
        spec.task_id,
        spec.name,
        len(new_ids),
        len(model.vocab),
        model.committee.num_experts,
    )
    return model


def freeze_past_experts(model: COSFormer, current_task: int) -> COSFormer:
    if not 0 <= current_task < model.num_tasks:
        raise ContractViolation(f"task {current_task} is not registered")
    model.committee.freeze_before(current_task)
    return model


def importance_scores(bags: Sequence[np.ndarray], class_embedding: np.ndarray) -> np.ndarray:
    """Per bag, the largest dot product between a patch and the class embedding."""
    scores = np.empty(len(bags))
    for i, patches in enumerate(bags):
        patches = np.asarray(patches)
        if patches.ndim != 2 or len(patches) == 0:
            raise ContractViolation(f"bag {i} has no patches")
        if patches.shape[1] != class_embedding.shape[-1]:
            raise ContractViolation(
                f"bag {i} has d_f={patches.shape[1]}, class embedding has {class_embedding.shape[-1]}"
            )
        scores[i] = np.max(patches @ class_embedding)
    return scores


def _memory(
    model: COSFormer, patches: np.ndarray, task_id: int, config: TrainConfig
) -> Tensor:
    target = model.ec_target(task_id if config.task_known else None, config.use_task_for_ec)
    return model.memory(patches, target, config.gamma, config.beta)


def snapshot_logits(
    model: COSFormer, bag: LabelledBag, config: TrainConfig
) -> np.ndarray:
    """Teacher-forced logits of every target step, one row per step."""
    with no_grad():
        memory = _memory(model, bag.patches, bag.task_id, config)
        return model.sample_logits(memory, bag.task_id, bag.class_id).data.copy()


def _entry(model: COSFormer, bag: BagRecord, config: TrainConfig, score: Optional[float] = None) -> BufferEntry:
    return BufferEntry(
        bag_id=bag.bag_id,
        task_id=bag.task_id,
        class_id=bag.class_id,
        patches=bag.patches,
        label=model.vocab.label(bag.task_id, bag.class_id),
        snapshot=snapshot_logits(model, bag, config),
        score=score,
    )


def select_representatives(
    model: COSFormer,
    task: TaskSpec,
    train_bags: Sequence[BagRecord],
    text_encoder: ClassTextEncoder,
    buffer: RehearsalBuffer,
    config: TrainConfig,
    rng: np.random.Generator,
) -> RehearsalBuffer:
    """Text-guided retrieval: per class and cluster, the bag closest to the class text.

    Ties go to the lowest bag id. Overflow is trimmed by random deletion.
    """
    added = []
    for spec in task.classes:
        bags = sorted((b for b in train_bags if b.class_id == spec.class_id), key=lambda b: b.bag_id)
        if not bags:
            logger.warning("task %d class %d has no training bags", task.task_id, spec.class_id)
            continue
        patches = [b.patches for b in bags]
        scores = importance_scores(patches, text_encoder.embed_class(spec.name))
        clusters = cluster_slides(patches, config.n_clusters, config.seed, config.slide_distance)
        for cluster in np.unique(clusters):
            members = np.flatnonzero(clusters == cluster)
            best = int(members[np.argmax(scores[members])])
            added.append(_entry(model, bags[best], config, float(scores[best])))
    buffer.entries.extend(added)
    removed = buffer.enforce_capacity(rng)
    logger.info(
        "buffer: +%d entries, -%d deleted, %d/%d stored",
        len(added),
        len(removed),
        len(buffer),
        buffer.capacity,
    )
    return buffer


def reservoir_update(
    model: COSFormer,
    train_bags: Sequence[BagRecord],
    buffer: RehearsalBuffer,
    config: TrainConfig,
    rng: np.random.Generator,
) -> RehearsalBuffer:
    """Classic reservoir sampling over every training bag seen so far."""
    chosen: dict[int, BagRecord] = {}
    for bag in sorted(train_bags, key=lambda b: b.bag_id):
        buffer.seen += 1
        if len(buffer.entries) < buffer.capacity:
            buffer.entries.append(BufferEntry(bag.bag_id, bag.task_id, bag.class_id, bag.patches, ()))
            chosen[bag.bag_id] = bag
            continue
        slot = int(rng.integers(0, buffer.seen))
        if slot < buffer.capacity:
            buffer.entries[slot] = BufferEntry(bag.bag_id, bag.task_id, bag.class_id, bag.patches, ())
            chosen[bag.bag_id] = bag
    for i, entry in enumerate(buffer.entries):
        if entry.snapshot is None and entry.bag_id in chosen:
            buffer.entries[i] = _entry(model, chosen[entry.bag_id], config)
    return buffer


def random_update(
    model: COSFormer,
    task: TaskSpec,
    train_bags: Sequence[BagRecord],
    buffer: RehearsalBuffer,
    config: TrainConfig,
    rng: np.random.Generator,
) -> RehearsalBuffer:
    """Same per-class quota as text retrieval, picked uniformly at random."""
    for spec in task.classes:
        bags = sorted((b for b in train_bags if b.class_id == spec.class_id), key=lambda b: b.bag_id)
        quota = min(config.n_clusters, len(bags))
        if quota == 0:
            continue
        for i in sorted(rng.choice(len(bags), size=quota, replace=False)):
            buffer.entries.append(_entry(model, bags[int(i)], config))
    buffer.enforce_capacity(rng)
    return buffer


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _mean_of(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / len(terms)


def past_to_present_loss(
    model: COSFormer,
    current: Sequence[LabelledBag],
    replay: Sequence[BufferEntry],
    config: TrainConfig,
) -> Tensor:
    """Current-task CE + buffer CE + buffer logit MSE, weighted 1:1:1.

    Each CE is averaged over steps, then over bags. The MSE compares current
    logits truncated to the snapshot's vocabulary width.
    """
    if not current:
        raise ContractViolation("past_to_present_loss needs at least one current bag")
    current_terms = []
    for bag in current:
        memory = _memory(model, bag.patches, bag.task_id, config)
        logits = model.sample_logits(memory, bag.task_id, bag.class_id)
        current_terms.append(cross_entropy(logits, model.sample_targets(bag.task_id, bag.class_id)))
    loss = _mean_of(current_terms)
    if not replay:
        return loss
    ce_terms, mse_terms = [], []
    for entry in replay:
        if entry.snapshot is None:
            raise ContractViolation(f"buffer entry for bag {entry.bag_id} has no snapshot")
        memory = _memory(model, entry.patches, entry.task_id, config)
        logits = model.sample_logits(memory, entry.task_id, entry.class_id)
        steps, width = entry.snapshot.shape
        if logits.shape[0] != steps or logits.shape[1] < width:
            raise ContractViolation(
                f"snapshot of bag {entry.bag_id} is {entry.snapshot.shape}, logits are {logits.shape}"
            )
        ce_terms.append(cross_entropy(logits, model.sample_targets(entry.task_id, entry.class_id)))
        mse_terms.append(mse(logits[:, :width], entry.snapshot))
    return loss + _mean_of(ce_terms) + _mean_of(mse_terms)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def bag_correct(model: COSFormer, bag: LabelledBag, config: TrainConfig) -> bool:
    with no_grad():
        memory = _memory(model, bag.patches, bag.task_id, config)
    if model.uses_decoder:
        woi_task = bag.task_id if config.task_known and config.use_woi else None
        decoded = greedy_decode(model, memory, woi_task)
        return classify_decoded(decoded, model.vocab.label(bag.task_id, bag.class_id))
    restrict = bag.task_id if config.task_known else None
    return predict_class(model, memory, restrict) == model.vocab.global_class(
        bag.task_id, bag.class_id
    )


def evaluate_bags(model: COSFormer, bags: Sequence[LabelledBag], config: TrainConfig) -> float:
    if not bags:
        raise ContractViolation("cannot evaluate an empty split")
    return sum(bag_correct(model, b, config) for b in bags) / len(bags)


def validation_loss(model: COSFormer, bags: Sequence[LabelledBag], config: TrainConfig) -> float:
    with no_grad():
        return past_to_present_loss(model, bags, [], config).item()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    patience: int = 5
    best: float = float("inf")
    best_epoch: int = 0
    bad_epochs: int = 0

    def update(self, value: float, epoch: int) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def train_task(
    model: COSFormer,
    task: TaskSpec,
    train_bags: Sequence[BagRecord],
    val_bags: Sequence[BagRecord],
    buffer: RehearsalBuffer,
    config: TrainConfig,
    rng: np.random.Generator,
) -> TaskTrace:
    """Epoch loop with rehearsal and early stopping; restores the best weights."""
    if not train_bags:
        raise ContractViolation(f"task {task.task_id} has no training bags")
    monitor = list(val_bags)
    if not monitor:
        logger.warning("task %d has no validation bags; monitoring the training split", task.task_id)
        monitor = list(train_bags)
    optimizer = Adam(model.parameters(), config.learning_rate)
    stopper = EarlyStopping(config.patience)
    best_state = model.state_dict()
    trace = TaskTrace(task.task_id, task.name)
    epochs = tqdm(
        range(1, config.max_epochs + 1),
        desc=f"task {task.task_id}",
        disable=not config.progress,
        leave=False,
    )
    for epoch in epochs:
        order = rng.permutation(len(train_bags))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_bags[i] for i in order[start : start + config.batch_size]]
            replay = buffer.sample(config.effective_replay_size, rng)
            optimizer.zero_grad()
            loss = past_to_present_loss(model, batch, replay, config)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        val_loss = validation_loss(model, monitor, config)
        val_accuracy = evaluate_bags(model, monitor, config)
        improved = stopper.update(val_loss, epoch)
        if improved:
            best_state = model.state_dict()
        trace.add_epoch(EpochRecord(epoch, float(np.mean(losses)), val_loss, val_accuracy, improved))
        logger.debug(trace.epochs[-1].get_summary())
        epochs.set_postfix(val_loss=f"{val_loss:.4f}", acc=f"{val_accuracy:.2f}")
        if stopper.should_stop:
            trace.stop_reason = StopReason.PATIENCE
            break
    model.load_state_dict(best_state)
    logger.info(
        "task %d: %d epochs, best epoch %d (val loss %.6f)",
        task.task_id,
        len(trace.epochs),
        stopper.best_epoch,
        stopper.best,
    )
    return trace


def update_buffer(
    model: COSFormer,
    task: TaskSpec,
    train_bags: Sequence[BagRecord],
    text_encoder: ClassTextEncoder,
    buffer: RehearsalBuffer,
    config: TrainConfig,
    rng: np.random.Generator,
) -> RehearsalBuffer:
    strategy = config.buffer_strategy
    if strategy is BufferStrategy.TEXT_RETRIEVAL:
        return select_representatives(model, task, train_bags, text_encoder, buffer, config, rng)
    if strategy is BufferStrategy.RESERVOIR:
        return reservoir_update(model, train_bags, buffer, config, rng)
    if strategy is BufferStrategy.RANDOM:
        return random_update(model, task, train_bags, buffer, config, rng)
    return buffer


@dataclass
class SequenceResult:
    matrix: AccuracyMatrix
    model: COSFormer
    buffer: RehearsalBuffer
    trace: TrainingTrace
    stream: Stream


StageCallback = Callable[[int, COSFormer, RehearsalBuffer], None]


def run_sequence(
    stream: Stream,
    order: Sequence[int],
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    text_encoder: Optional[ClassTextEncoder] = None,
    on_stage: Optional[StageCallback] = None,
) -> SequenceResult:
    """Train the tasks in ``order`` one after another, filling the accuracy matrix.

    Tasks are re-indexed 0..T-1 in training order first.
    """
    stream = stream.reordered(order)
    model_config = model_config or ModelConfig(
        d_f=stream.config.d_f, d_text=stream.config.d_text
    )
    text_encoder = text_encoder or TextStub.from_stream(stream)
    model = COSFormer(model_config, text_encoder, seed=config.seed)
    capacity = 0 if config.buffer_strategy is BufferStrategy.NONE else config.buffer_size
    buffer = RehearsalBuffer(capacity=capacity)
    shuffle_rng = named_rng(config.seed, "shuffle")
    deletion_rng = named_rng(config.seed, "deletion")
    matrix = AccuracyMatrix(len(stream.tasks))
    trace = TrainingTrace()

    stages = tqdm(stream.tasks, desc="tasks", disable=not config.progress)
    for task in stages:
        t = task.task_id
        register_task(model, task)
        freeze_past_experts(model, t)
        train_bags = stream.bags_of(t, "train")
        task_trace = train_task(
            model, task, train_bags, stream.bags_of(t, "val"), buffer, config, shuffle_rng
        )
        update_buffer(model, task, train_bags, text_encoder, buffer, config, deletion_rng)
        task_trace.buffer_size = len(buffer)
        trace.add_task(task_trace)
        for seen in stream.tasks[: t + 1]:
            accuracy = evaluate_bags(model, stream.bags_of(seen.task_id, "test"), config)
            matrix.record(t, seen.task_id, accuracy)
        logger.info("stage %d accuracies: %s", t, matrix.row(t))
        if on_stage is not None:
            on_stage(t, model, buffer)
    return SequenceResult(matrix, model, buffer, trace, stream)


def with_scenario(config: TrainConfig, scenario: Union[str, Scenario]) -> TrainConfig:
    """Copy of ``config`` evaluating under another scenario."""
    return replace(config, scenario=Scenario.parse(scenario))
