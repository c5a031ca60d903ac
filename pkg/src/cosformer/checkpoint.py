"""
COSC checkpoint files.

Layout (little-endian): magic ``COSC``, u32 version, u32 header length, a
UTF-8 JSON header, then the float64 payload of every tensor listed in the
header's tensor table.
"""

import json
import logging
import struct
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .continual import BufferEntry, RehearsalBuffer, TrainConfig
from .errors import ContractViolation, FormatError
from .model import COSFormer, ModelConfig
from .tasks import TaskSpec

logger = logging.getLogger(__name__)

MAGIC = b"COSC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class StoredWordTable:
    """Text encoder that serves the word embeddings saved in a checkpoint."""

    def __init__(self, words: Iterable[str], table: np.ndarray):
        self.table = table
        self.d_text = int(table.shape[1])
        self._rows = {w: i for i, w in enumerate(words)}

    def embed_word(self, word: str) -> np.ndarray:
        try:
            return self.table[self._rows[word]]
        except KeyError:
            raise ContractViolation(f"word not stored in checkpoint: {word}") from None


@dataclass
class Checkpoint:
    model: COSFormer
    train_config: TrainConfig
    buffer: RehearsalBuffer
    stage: int
    seed: int


def _tensor_table(tensors: dict[str, np.ndarray]) -> tuple[list[dict[str, Any]], bytes]:
    table, chunks, offset = [], [], 0
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    return table, b"".join(chunks)


def save_checkpoint(
    path: Union[str, Path],
    model: COSFormer,
    train_config: TrainConfig,
    buffer: RehearsalBuffer,
    stage: int,
    seed: int = 0,
) -> Path:
    path = Path(path)
    tensors: dict[str, np.ndarray] = {
        f"param.{name}": p.data for name, p in model.named_parameters().items()
    }
    tensors["word_table"] = model.decoder.word_table
    entries = []
    for i, entry in enumerate(buffer.entries):
        tensors[f"buffer.{i}.patches"] = entry.patches
        if entry.snapshot is not None:
            tensors[f"buffer.{i}.snapshot"] = entry.snapshot
        entries.append(
            {
                "bag_id": entry.bag_id,
                "task_id": entry.task_id,
                "class_id": entry.class_id,
                "label": list(entry.label),
                "score": entry.score,
                "has_snapshot": entry.snapshot is not None,
            }
        )
    table, payload = _tensor_table(tensors)
    header = {
        "stage": stage,
        "seed": seed,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict(),
        "tasks": [t.to_dict() for t in model.tasks],
        "vocabulary": model.vocab.to_dict(),
        "frozen": sorted(name for name, p in model.named_parameters().items() if p.frozen),
        "buffer": {"capacity": buffer.capacity, "seen": buffer.seen, "entries": entries},
        "tensors": table,
    }
    encoded = json.dumps(header).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_PREFIX.pack(MAGIC, VERSION, len(encoded)) + encoded + payload)
    logger.debug("wrote checkpoint %s (%d tensors)", path, len(table))
    return path


def _read_tensors(path: Path, table: list[dict[str, Any]], payload: bytes) -> dict[str, np.ndarray]:
    tensors = {}
    for item in table:
        count = int(np.prod(item["shape"], dtype=np.int64))
        start, end = item["offset"], item["offset"] + 8 * count
        if end > len(payload):
            raise FormatError(path, f"tensor {item['name']} runs past the end of the payload")
        tensors[item["name"]] = (
            np.frombuffer(payload[start:end], dtype="<f8").reshape(item["shape"]).astype(np.float64)
        )
    return tensors


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(path, "truncated checkpoint prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(path, f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(path, f"unsupported checkpoint version {version}")
    body = raw[_PREFIX.size :]
    if len(body) < header_len:
        raise FormatError(path, "truncated checkpoint header")
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(path, f"malformed header: {e}") from e
    if not isinstance(header, dict):
        raise FormatError(path, "malformed header: not a JSON object")
    try:
        return _restore(path, header, body[header_len:])
    except KeyError as e:
        raise FormatError(path, f"missing header field {e}") from e


def _restore(path: Path, header: dict[str, Any], payload: bytes) -> Checkpoint:
    tensors = _read_tensors(path, header["tensors"], payload)

    model_config = ModelConfig.from_dict(header["model_config"])
    train_config = TrainConfig.from_dict(header["train_config"])
    words = header["vocabulary"]["words"]
    model = COSFormer(model_config, StoredWordTable(words, tensors["word_table"]), seed=header["seed"])
    for task in header["tasks"]:
        model.add_task(TaskSpec.from_dict(task))
    if model.vocab.words != words:
        raise FormatError(path, "vocabulary does not replay from the stored tasks")
    model.load_state_dict(
        {name[len("param.") :]: t for name, t in tensors.items() if name.startswith("param.")}
    )
    model.decoder.word_table = tensors["word_table"]
    frozen = set(header["frozen"])
    for name, param in model.named_parameters().items():
        param.frozen = name in frozen

    buffer_data = header["buffer"]
    buffer = RehearsalBuffer(capacity=buffer_data["capacity"], seen=buffer_data["seen"])
    for i, item in enumerate(buffer_data["entries"]):
        snapshot: Optional[np.ndarray] = (
            tensors[f"buffer.{i}.snapshot"] if item["has_snapshot"] else None
        )
        buffer.entries.append(
            BufferEntry(
                bag_id=item["bag_id"],
                task_id=item["task_id"],
                class_id=item["class_id"],
                patches=tensors[f"buffer.{i}.patches"],
                label=tuple(item["label"]),
                snapshot=snapshot,
                score=item["score"],
            )
        )
    return Checkpoint(model, train_config, buffer, int(header["stage"]), int(header["seed"]))
