"""Builders shared by the test modules."""

import numpy as np

from cosformer import ModelConfig, StreamConfig
from cosformer.tasks import ClassSpec, TaskSpec


def small_model_config(**overrides):
    fields = {
        "d_f": 8,
        "d_model": 16,
        "d_text": 8,
        "n_heads": 2,
        "n_encoder_layers": 1,
        "n_decoder_layers": 1,
        "n_landmarks": 4,
    }
    fields.update(overrides)
    return ModelConfig(**fields)


def small_stream_config(**overrides):
    fields = {
        "n_tasks": 2,
        "classes_per_task": 2,
        "d_f": 8,
        "d_text": 8,
        "n_min": 4,
        "n_max": 6,
        "signal_patches": 2,
        "bags_per_class": 10,
        "seed": 3,
    }
    fields.update(overrides)
    return StreamConfig(**fields)


def make_task(task_id, labels, name=None):
    classes = tuple(
        ClassSpec(i, " ".join(words), tuple(words)) for i, words in enumerate(labels)
    )
    return TaskSpec(task_id, name or f"task{task_id}", classes)


class WordHashEncoder:
    """Text encoder for model-only tests: any word gets a fixed random vector."""

    def __init__(self, d_text=8):
        self.d_text = d_text
        self._cache = {}

    def embed_word(self, word):
        if word not in self._cache:
            seed = sum(ord(ch) * (i + 1) for i, ch in enumerate(word))
            vector = np.random.default_rng(seed).normal(size=self.d_text)
            self._cache[word] = vector / np.linalg.norm(vector)
        return self._cache[word]

    def embed_class(self, name):
        vector = np.random.default_rng(len(name)).normal(size=self.d_text)
        return vector / np.linalg.norm(vector)
