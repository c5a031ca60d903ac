"""Tests for COSC checkpoint files."""

import json
import struct

import numpy as np
import pytest

from cosformer.checkpoint import StoredWordTable, load_checkpoint, save_checkpoint
from cosformer.continual import BufferEntry, RehearsalBuffer, TrainConfig, freeze_past_experts
from cosformer.errors import ContractViolation, FormatError
from cosformer.model import greedy_decode


@pytest.fixture
def saved(two_task_model, tmp_path):
    freeze_past_experts(two_task_model, 1)
    rng = np.random.default_rng(0)
    buffer = RehearsalBuffer(capacity=4, seen=9)
    buffer.entries.append(BufferEntry(3, 0, 1, rng.normal(size=(5, 8)), (2, 4, 5), rng.normal(size=(4, 8)), 0.75))
    buffer.entries.append(BufferEntry(7, 1, 0, rng.normal(size=(2, 8)), (6, 5)))
    config = TrainConfig(scenario="class-il", seed=4)
    path = save_checkpoint(tmp_path / "checkpoints" / "task_1.cosc", two_task_model, config, buffer, 1, seed=4)
    return path, two_task_model, config, buffer


class TestRoundTrip:
    def test_parameters_restored_bitwise(self, saved):
        path, model, _, _ = saved
        restored = load_checkpoint(path).model
        original = model.state_dict()
        loaded = restored.state_dict()
        assert set(loaded) == set(original)
        for name, value in original.items():
            assert np.array_equal(loaded[name], value), name

    def test_frozen_flags(self, saved):
        path, model, _, _ = saved
        restored = load_checkpoint(path).model
        frozen = {n for n, p in restored.named_parameters().items() if p.frozen}
        assert frozen == {n for n, p in model.named_parameters().items() if p.frozen}
        assert "ec.expert.0" in frozen

    def test_vocabulary_and_tasks(self, saved):
        path, model, _, _ = saved
        restored = load_checkpoint(path).model
        assert restored.vocab.words == model.vocab.words
        assert [t.to_dict() for t in restored.tasks] == [t.to_dict() for t in model.tasks]
        assert np.array_equal(restored.decoder.word_table, model.decoder.word_table)

    def test_buffer_and_metadata(self, saved):
        path, _, config, buffer = saved
        checkpoint = load_checkpoint(path)
        assert (checkpoint.stage, checkpoint.seed) == (1, 4)
        assert checkpoint.train_config == config
        assert (checkpoint.buffer.capacity, checkpoint.buffer.seen) == (4, 9)
        first, second = checkpoint.buffer.entries
        assert first.label == (2, 4, 5)
        assert first.score == 0.75
        assert np.array_equal(first.snapshot, buffer.entries[0].snapshot)
        assert np.array_equal(second.patches, buffer.entries[1].patches)
        assert second.snapshot is None

    def test_restored_model_decodes_identically(self, saved):
        path, model, _, _ = saved
        restored = load_checkpoint(path).model
        patches = np.random.default_rng(1).normal(size=(6, 8))
        before = greedy_decode(model, model.memory(patches, 0, 5.0, 1.0), task_id=0)
        after = greedy_decode(restored, restored.memory(patches, 0, 5.0, 1.0), task_id=0)
        assert before.tokens == after.tokens
        for a, b in zip(before.steps, after.steps):
            assert np.array_equal(a, b)


class TestCorruption:
    def test_bad_magic(self, saved):
        path = saved[0]
        path.write_bytes(b"NOPE" + path.read_bytes()[4:])
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, saved):
        path = saved[0]
        raw = path.read_bytes()
        path.write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_truncated_prefix(self, saved):
        path = saved[0]
        path.write_bytes(path.read_bytes()[:6])
        with pytest.raises(FormatError, match="prefix"):
            load_checkpoint(path)

    def test_truncated_payload(self, saved):
        path = saved[0]
        path.write_bytes(path.read_bytes()[:-64])
        with pytest.raises(FormatError, match="past the end"):
            load_checkpoint(path)

    def test_malformed_header(self, saved):
        path = saved[0]
        raw = path.read_bytes()
        (header_len,) = struct.unpack_from("<I", raw, 8)
        path.write_bytes(raw[:12] + b"\xff" * header_len + raw[12 + header_len :])
        with pytest.raises(FormatError, match="malformed header"):
            load_checkpoint(path)

    @pytest.mark.parametrize("field", ["tensors", "vocabulary", "buffer"])
    def test_missing_header_field(self, saved, field):
        path = saved[0]
        raw = path.read_bytes()
        (header_len,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12 : 12 + header_len])
        del header[field]
        encoded = json.dumps(header).encode("utf-8")
        path.write_bytes(raw[:8] + struct.pack("<I", len(encoded)) + encoded + raw[12 + header_len :])
        with pytest.raises(FormatError, match=f"missing header field '{field}'"):
            load_checkpoint(path)

    def test_header_must_be_an_object(self, saved):
        path = saved[0]
        raw = path.read_bytes()
        (header_len,) = struct.unpack_from("<I", raw, 8)
        path.write_bytes(raw[:8] + struct.pack("<I", 2) + b"[]" + raw[12 + header_len :])
        with pytest.raises(FormatError, match="not a JSON object"):
            load_checkpoint(path)


class TestStoredWordTable:
    def test_lookup(self):
        table = StoredWordTable(["<bos>", "<eos>", "lung"], np.eye(3))
        assert np.array_equal(table.embed_word("lung"), [0.0, 0.0, 1.0])
        assert table.d_text == 3
        with pytest.raises(ContractViolation):
            table.embed_word("colon")
