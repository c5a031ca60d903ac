"""
Append-only word registry with per-task Words of Interest.
"""

from collections.abc import Iterable, Sequence
from typing import Any

from .errors import ContractViolation
from .tasks import TaskSpec

BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
BOS = 0
EOS = 1


class Vocabulary:
    """Word list with stable ids.

    Ids never change once assigned. Besides the words, the registry keeps
    each task's Words of Interest and each (task, class) label sequence; the
    order in which classes were registered defines their cumulative index.
    """

    def __init__(self) -> None:
        self.words: list[str] = [BOS_TOKEN, EOS_TOKEN]
        self._index: dict[str, int] = {BOS_TOKEN: BOS, EOS_TOKEN: EOS}
        self.woi: dict[int, frozenset[int]] = {}
        self.labels: dict[tuple[int, int], tuple[int, ...]] = {}
        self.class_order: list[tuple[int, int]] = []

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise ContractViolation(f"unknown word: {word}") from None

    def add_word(self, word: str) -> int:
        """Return the id of ``word``, appending it if it is new."""
        if word in self._index:
            return self._index[word]
        self._index[word] = len(self.words)
        self.words.append(word)
        return self._index[word]

    def encode(self, words: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id_of(w) for w in words)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def register_task(self, task: TaskSpec) -> list[int]:
        """Add the task's label words; return the ids that were new."""
        if task.task_id in self.woi:
            raise ContractViolation(f"task {task.task_id} already has a vocabulary entry")
        before = len(self.words)
        interest: set[int] = set()
        for spec in task.classes:
            ids = tuple(self.add_word(w) for w in spec.label_words)
            self.labels[(task.task_id, spec.class_id)] = ids
            self.class_order.append((task.task_id, spec.class_id))
            interest.update(ids)
        self.woi[task.task_id] = frozenset(interest)
        return list(range(before, len(self.words)))

    def label(self, task_id: int, class_id: int) -> tuple[int, ...]:
        try:
            return self.labels[(task_id, class_id)]
        except KeyError:
            raise ContractViolation(f"no label for task {task_id} class {class_id}") from None

    def global_class(self, task_id: int, class_id: int) -> int:
        """Cumulative class index across all registered tasks."""
        try:
            return self.class_order.index((task_id, class_id))
        except ValueError:
            raise ContractViolation(f"class {class_id} of task {task_id} is not registered") from None

    def class_range(self, task_id: int) -> list[int]:
        return [i for i, (t, _) in enumerate(self.class_order) if t == task_id]

    def words_of_interest(self, task_id: int) -> frozenset[int]:
        try:
            return self.woi[task_id]
        except KeyError:
            raise ContractViolation(f"task {task_id} is not registered") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "words": list(self.words),
            "woi": {str(t): sorted(ids) for t, ids in self.woi.items()},
            "labels": [[t, c, list(ids)] for (t, c), ids in self.labels.items()],
            "class_order": [list(pair) for pair in self.class_order],
        }
