"""
Synthetic task streams standing in for slide datasets and pretrained encoders.

Each class owns a unit-norm signature direction. A bag of that class mixes a
few signal patches (signature plus Gaussian noise) with unit-norm noise
patches. ``TextStub`` plays the text encoder: class embeddings sit near the
signatures, word embeddings are hash-derived unit vectors.
"""

import hashlib
import json
import logging
import struct
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .errors import ContractViolation, FormatError, GenerationFault
from .numerics import named_rng
from .tasks import ClassSpec, Scenario, TaskSpec, validate_task_ids
from .vocabulary import BOS_TOKEN, EOS_TOKEN

logger = logging.getLogger(__name__)

BAG_MAGIC = b"COSB"
BAG_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")
MAX_SIGNATURE_ATTEMPTS = 1000
MAX_SIGNATURE_COSINE = 0.5

DEFAULT_LABELS: tuple[tuple[str, ...], ...] = (
    ("lung", "adenocarcinoma"),
    ("lung", "squamous", "carcinoma"),
    ("invasive", "ductal", "carcinoma"),
    ("invasive", "lobular", "carcinoma"),
    ("clear", "cell", "renal"),
    ("papillary", "renal"),
    ("chromophobe", "renal"),
    ("normal", "lymph", "node"),
    ("tumor", "metastasis"),
    ("colon", "adenocarcinoma"),
)
DEFAULT_TASK_NAMES = ("nsclc", "brca", "rcc", "camelyon", "colon")


@dataclass
class StreamConfig:
    """Shape and noise level of a synthetic task stream."""

    n_tasks: int = 3
    classes_per_task: int = 2
    labels: list[list[str]] = field(default_factory=lambda: [list(words) for words in DEFAULT_LABELS])
    task_names: list[str] = field(default_factory=lambda: list(DEFAULT_TASK_NAMES))
    d_f: int = 16
    d_text: int = 16
    n_min: int = 8
    n_max: int = 16
    signal_patches: int = 3
    sigma: float = 0.1
    sigma_text: float = 0.05
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    bags_per_class: int = 250
    class_multipliers: Optional[list[float]] = None
    seed: int = 0

    def __post_init__(self) -> None:
        self.fractions = tuple(float(f) for f in self.fractions)  # type: ignore[assignment]
        n_classes = self.n_tasks * self.classes_per_task
        if self.n_tasks < 1 or self.classes_per_task < 1:
            raise ContractViolation("a stream needs at least one task and one class per task")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ContractViolation(f"split fractions must sum to 1, got {self.fractions}")
        if min(self.fractions) < 0:
            raise ContractViolation("split fractions must be non-negative")
        if self.n_min < self.signal_patches or self.n_min < 1:
            raise ContractViolation(
                f"n_min={self.n_min} must be >= signal_patches={self.signal_patches} and >= 1"
            )
        if self.n_max < self.n_min:
            raise ContractViolation(f"n_max={self.n_max} is below n_min={self.n_min}")
        if len(self.labels) < n_classes:
            raise ContractViolation(f"{n_classes} classes need labels, only {len(self.labels)} given")
        if len(self.task_names) < self.n_tasks:
            raise ContractViolation(f"{self.n_tasks} tasks need names")
        names = [" ".join(words) for words in self.labels[:n_classes]]
        if len(set(names)) != len(names):
            raise ContractViolation("class labels must be distinct")
        if self.class_multipliers is not None and len(self.class_multipliers) != n_classes:
            raise ContractViolation(f"class_multipliers needs {n_classes} entries")
        if self.sigma < 0 or self.sigma_text < 0:
            raise ContractViolation("noise levels must be non-negative")
        if self.d_f < 2 or self.d_text < 1 or self.bags_per_class < 1:
            raise ContractViolation("d_f >= 2, d_text >= 1 and bags_per_class >= 1 are required")

    @property
    def n_classes(self) -> int:
        return self.n_tasks * self.classes_per_task

    def bags_for(self, global_class: int) -> int:
        multiplier = 1.0 if self.class_multipliers is None else self.class_multipliers[global_class]
        return max(1, int(round(self.bags_per_class * multiplier)))

    def split_counts(self, n_bags: int) -> tuple[int, int, int]:
        n_train = int(round(n_bags * self.fractions[0]))
        n_val = min(int(round(n_bags * self.fractions[1])), n_bags - n_train)
        return n_train, n_val, n_bags - n_train - n_val

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["fractions"] = list(self.fractions)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StreamConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "fractions" in known:
            known["fractions"] = tuple(known["fractions"])
        return cls(**known)


def load_stream_config(path: Union[str, Path]) -> StreamConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(path, f"invalid JSON: {e}") from e
    if not isinstance(data, dict):
        raise FormatError(path, "stream config must be a JSON object")
    try:
        return StreamConfig.from_dict(data)
    except TypeError as e:
        raise FormatError(path, str(e)) from e


@dataclass
class BagRecord:
    bag_id: int
    task_id: int
    class_id: int
    patches: np.ndarray
    split: str

    @property
    def n_patches(self) -> int:
        return int(self.patches.shape[0])


@dataclass
class Stream:
    """Tasks, bags and per-class signatures (keyed by class name)."""

    config: StreamConfig
    tasks: list[TaskSpec]
    bags: list[BagRecord]
    signatures: dict[str, np.ndarray]

    def class_name(self, task_id: int, class_id: int) -> str:
        return self.tasks[task_id].classes[class_id].name

    def signature(self, task_id: int, class_id: int) -> np.ndarray:
        return self.signatures[self.class_name(task_id, class_id)]

    def bags_of(self, task_id: int, split: Optional[str] = None) -> list[BagRecord]:
        return [
            b for b in self.bags if b.task_id == task_id and (split is None or b.split == split)
        ]

    def bag(self, bag_id: int) -> BagRecord:
        for b in self.bags:
            if b.bag_id == bag_id:
                return b
        raise ContractViolation(f"unknown bag id {bag_id}")

    def words(self) -> set[str]:
        return {w for task in self.tasks for c in task.classes for w in c.label_words}

    def reordered(self, order: Sequence[int]) -> "Stream":
        """Same stream with tasks re-indexed 0..T-1 in the given order."""
        if sorted(order) != list(range(len(self.tasks))):
            raise ContractViolation(f"order {list(order)} is not a permutation of the tasks")
        new_id = {old: new for new, old in enumerate(order)}
        tasks = [self.tasks[old].with_id(new) for new, old in enumerate(order)]
        bags = [replace(b, task_id=new_id[b.task_id]) for b in self.bags]
        return Stream(self.config, tasks, bags, dict(self.signatures))


def _draw_signatures(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    signatures: list[np.ndarray] = []
    for index in range(n):
        for _attempt in range(MAX_SIGNATURE_ATTEMPTS):
            candidate = rng.normal(size=d)
            candidate /= np.linalg.norm(candidate)
            if all(abs(candidate @ s) < MAX_SIGNATURE_COSINE for s in signatures):
                signatures.append(candidate)
                break
        else:
            raise GenerationFault(
                f"could not separate signature {index} from {len(signatures)} others "
                f"in {d} dimensions after {MAX_SIGNATURE_ATTEMPTS} attempts"
            )
    return np.stack(signatures)


def _make_bag(
    signature: np.ndarray, config: StreamConfig, rng: np.random.Generator
) -> np.ndarray:
    n = int(rng.integers(config.n_min, config.n_max + 1))
    signal = signature + rng.normal(0.0, config.sigma, size=(config.signal_patches, config.d_f))
    noise = rng.normal(0.0, 1.0, size=(n - config.signal_patches, config.d_f))
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    patches = np.vstack([signal, noise])
    return patches[rng.permutation(n)]


def make_stream(config: StreamConfig) -> Stream:
    """Generate a full stream; a pure function of the config (seed included)."""
    rng = named_rng(config.seed, "data")
    signature_matrix = _draw_signatures(config.n_classes, config.d_f, rng)
    tasks: list[TaskSpec] = []
    signatures: dict[str, np.ndarray] = {}
    bags: list[BagRecord] = []
    for t in range(config.n_tasks):
        classes = []
        for c in range(config.classes_per_task):
            g = t * config.classes_per_task + c
            words = tuple(config.labels[g])
            classes.append(ClassSpec(c, " ".join(words), words))
            signatures[classes[-1].name] = signature_matrix[g]
        tasks.append(TaskSpec(t, config.task_names[t], tuple(classes)))
    for task in tasks:
        for spec in task.classes:
            g = task.task_id * config.classes_per_task + spec.class_id
            n_bags = config.bags_for(g)
            n_train, n_val, _ = config.split_counts(n_bags)
            split_of = ["train"] * n_train + ["val"] * n_val
            split_of += ["test"] * (n_bags - len(split_of))
            split_of = [split_of[i] for i in rng.permutation(n_bags)]
            for split in split_of:
                patches = _make_bag(signatures[spec.name], config, rng)
                bags.append(BagRecord(len(bags), task.task_id, spec.class_id, patches, split))
    logger.info("generated %d bags over %d tasks", len(bags), len(tasks))
    return Stream(config, tasks, bags, signatures)


def _hashed_rng(seed: int, kind: str, key: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{kind}:{key}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class TextStub:
    """Deterministic stand-in for a pretrained text encoder."""

    def __init__(
        self,
        class_signatures: dict[str, np.ndarray],
        words: Optional[Iterable[str]] = None,
        d_text: int = 16,
        seed: int = 0,
        sigma_text: float = 0.05,
    ):
        self.class_signatures = class_signatures
        self.words = None if words is None else set(words) | {BOS_TOKEN, EOS_TOKEN}
        self.d_text = d_text
        self.seed = seed
        self.sigma_text = sigma_text

    @classmethod
    def from_stream(cls, stream: Stream) -> "TextStub":
        config = stream.config
        return cls(stream.signatures, stream.words(), config.d_text, config.seed, config.sigma_text)

    def embed_class(self, name: str) -> np.ndarray:
        """Signature plus small noise, renormalized; lives in patch space."""
        if name not in self.class_signatures:
            raise ContractViolation(f"unknown class: {name}")
        signature = self.class_signatures[name]
        if self.sigma_text == 0.0:
            return signature.copy()
        rng = _hashed_rng(self.seed, "class", name)
        noisy = signature + rng.normal(0.0, self.sigma_text, size=signature.shape)
        return noisy / np.linalg.norm(noisy)

    def embed_word(self, word: str) -> np.ndarray:
        if self.words is not None and word not in self.words:
            raise ContractViolation(f"unknown word: {word}")
        vector = _hashed_rng(self.seed, "word", word).normal(size=self.d_text)
        return vector / np.linalg.norm(vector)


def _oracle_predict(patches: np.ndarray, candidates: Sequence[np.ndarray]) -> int:
    """Index of the signature with the largest patch dot product."""
    return int(np.argmax([np.max(patches @ s) for s in candidates]))


def oracle_accuracy(
    stream: Stream,
    task_id: int,
    split: str = "test",
    scenario: Scenario = Scenario.TASK_IL,
    seen_tasks: Optional[int] = None,
) -> float:
    """Nearest-signature accuracy on one task's split.

    Task-IL competes within the task; class-IL against every seen class.
    """
    if scenario is Scenario.TASK_IL:
        pool = [(task_id, c.class_id) for c in stream.tasks[task_id].classes]
    else:
        upto = len(stream.tasks) if seen_tasks is None else seen_tasks
        pool = [(t.task_id, c.class_id) for t in stream.tasks[:upto] for c in t.classes]
    candidates = [stream.signature(t, c) for t, c in pool]
    bags = stream.bags_of(task_id, split)
    if not bags:
        raise ContractViolation(f"task {task_id} has no {split} bags")
    hits = sum(pool[_oracle_predict(b.patches, candidates)] == (b.task_id, b.class_id) for b in bags)
    return hits / len(bags)


# ---------------------------------------------------------------------------
# Bag files and manifest
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIII")


def write_bag(path: Path, patches: np.ndarray) -> None:
    n, d = patches.shape
    payload = np.ascontiguousarray(patches, dtype="<f8").tobytes()
    path.write_bytes(_HEADER.pack(BAG_MAGIC, BAG_VERSION, n, d) + payload)


def read_bag(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(path, f"truncated header ({len(raw)} bytes)")
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != BAG_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}, expected {BAG_MAGIC!r}")
    if version != BAG_VERSION:
        raise FormatError(path, f"unsupported bag version {version}")
    expected = n * d * 8
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(
            path, f"payload has {len(payload)} bytes, header N*d_f={n}*{d} needs {expected}"
        )
    return np.frombuffer(payload, dtype="<f8").reshape(n, d).astype(np.float64)


def write_bags(stream: Stream, directory: Union[str, Path]) -> Path:
    """Write the manifest and one binary file per bag; return the manifest path."""
    directory = Path(directory)
    (directory / "bags").mkdir(parents=True, exist_ok=True)
    records = []
    for bag in stream.bags:
        relative = f"bags/bag_{bag.bag_id:06d}.bin"
        write_bag(directory / relative, bag.patches)
        records.append(
            {
                "bag_id": bag.bag_id,
                "task_id": bag.task_id,
                "class_id": bag.class_id,
                "split": bag.split,
                "path": relative,
                "n": bag.n_patches,
                "d_f": int(bag.patches.shape[1]),
            }
        )
    manifest = {
        "format": "cosformer-stream",
        "version": BAG_VERSION,
        "config": stream.config.to_dict(),
        "tasks": [t.to_dict() for t in stream.tasks],
        "signatures": {name: vec.tolist() for name, vec in stream.signatures.items()},
        "bags": records,
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_bags(directory: Union[str, Path]) -> Stream:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise FormatError(path, "manifest not found")
    try:
        manifest = json.loads(path.read_text())
        config = StreamConfig.from_dict(manifest["config"])
        tasks = [TaskSpec.from_dict(t) for t in manifest["tasks"]]
        signatures = {
            name: np.asarray(vec, dtype=np.float64) for name, vec in manifest["signatures"].items()
        }
        records = manifest["bags"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(path, f"malformed manifest: {e}") from e
    validate_task_ids(tasks)
    bag_files = sorted((directory / "bags").glob("bag_*.bin"))
    if len(bag_files) != len(records):
        raise FormatError(
            path, f"manifest lists {len(records)} bags but {len(bag_files)} bag files exist"
        )
    bags = []
    for record in records:
        bag_path = directory / record["path"]
        if not bag_path.exists():
            raise FormatError(bag_path, "bag file listed in manifest is missing")
        patches = read_bag(bag_path)
        if patches.shape != (record["n"], record["d_f"]):
            raise FormatError(
                bag_path, f"shape {patches.shape} disagrees with manifest ({record['n']}, {record['d_f']})"
            )
        bags.append(
            BagRecord(
                int(record["bag_id"]),
                int(record["task_id"]),
                int(record["class_id"]),
                patches,
                str(record["split"]),
            )
        )
    return Stream(config, tasks, bags, signatures)
