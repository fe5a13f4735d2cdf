"""Checkpoint format tests: bit-exact round trips, corruption detection,
and schema enforcement."""

import os

import numpy as np
import pytest

from conftest import build_model
from mvqa.weights import (
    MAGIC,
    CorruptWeightsError,
    SchemaError,
    WeightFormatError,
    load_model,
    read_checkpoint,
    restore_model_weights,
    save_model,
    write_checkpoint,
)


class TestRoundTrip:
    def test_bit_exact_restore_into_other_seed(self, corpus, tmp_path):
        source = build_model(corpus, seed=1)
        path = str(tmp_path / "model.mvqw")
        save_model(source, path)
        target = build_model(corpus, seed=2)
        restore_model_weights(target, path)
        for name, tensor in source.parameters().items():
            np.testing.assert_array_equal(tensor.data, target.parameters()[name].data)

    def test_load_model_rebuilds_everything(self, corpus, tmp_path):
        source = build_model(corpus, seed=3, gamma=0.4)
        path = str(tmp_path / "model.mvqw")
        save_model(source, path)
        loaded = load_model(path)
        assert loaded.config == source.config
        assert loaded.question_vocab.to_list() == source.question_vocab.to_list()
        assert loaded.answer_vocab.to_dict() == source.answer_vocab.to_dict()
        for name, tensor in source.parameters().items():
            np.testing.assert_array_equal(tensor.data, loaded.parameters()[name].data)

    def test_float64_round_trip(self, corpus, tmp_path):
        source = build_model(corpus, dtype=np.float64)
        path = str(tmp_path / "model.mvqw")
        save_model(source, path)
        loaded = load_model(path)
        for name, tensor in source.parameters().items():
            got = loaded.parameters()[name].data
            assert got.dtype == np.float64
            np.testing.assert_array_equal(tensor.data, got)

    def test_manifest_lists_every_parameter_once(self, corpus, tmp_path):
        model = build_model(corpus)
        path = str(tmp_path / "model.mvqw")
        save_model(model, path)
        tensors, meta = read_checkpoint(path)
        assert sorted(tensors) == sorted(model.parameters())
        assert meta["optimizer"] == {"beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8}
        assert meta["config"]["state_dim"] == model.config.state_dim

    def test_no_temp_file_left_behind(self, corpus, tmp_path):
        model = build_model(corpus)
        path = str(tmp_path / "model.mvqw")
        save_model(model, path)
        assert os.listdir(tmp_path) == ["model.mvqw"]


class TestCorruption:
    def _saved(self, corpus, tmp_path):
        model = build_model(corpus)
        path = str(tmp_path / "model.mvqw")
        save_model(model, path)
        return model, path

    def test_truncated_payload_rejected(self, corpus, tmp_path):
        model, path = self._saved(corpus, tmp_path)
        raw = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(raw[:-20])
        before = {n: t.data.copy() for n, t in model.parameters().items()}
        with pytest.raises(CorruptWeightsError, match="payload"):
            restore_model_weights(model, path)
        # the failed restore left the model untouched
        for name, tensor in model.parameters().items():
            np.testing.assert_array_equal(tensor.data, before[name])

    def test_truncated_manifest_rejected(self, corpus, tmp_path):
        _, path = self._saved(corpus, tmp_path)
        raw = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(raw[:20])
        with pytest.raises(CorruptWeightsError):
            read_checkpoint(path)

    def test_bad_magic_rejected(self, corpus, tmp_path):
        _, path = self._saved(corpus, tmp_path)
        raw = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(b"XXXX" + raw[4:])
        with pytest.raises(WeightFormatError, match="magic"):
            read_checkpoint(path)

    def test_unsupported_version_rejected(self, corpus, tmp_path):
        _, path = self._saved(corpus, tmp_path)
        raw = bytearray(open(path, "rb").read())
        raw[4:8] = (99).to_bytes(4, "little")
        with open(path, "wb") as fh:
            fh.write(raw)
        with pytest.raises(WeightFormatError, match="version"):
            read_checkpoint(path)

    def test_mangled_manifest_rejected(self, corpus, tmp_path):
        _, path = self._saved(corpus, tmp_path)
        raw = bytearray(open(path, "rb").read())
        raw[16] = ord("?")  # first manifest byte, breaks the JSON
        with open(path, "wb") as fh:
            fh.write(raw)
        with pytest.raises(CorruptWeightsError):
            read_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(WeightFormatError):
            read_checkpoint(str(tmp_path / "absent.mvqw"))


class TestSchema:
    def test_name_mismatch_rejected(self, corpus, tmp_path):
        from mvqa.autodiff import Tensor

        path = str(tmp_path / "odd.mvqw")
        write_checkpoint({"stray.tensor": Tensor(np.zeros(3))}, path)
        model = build_model(corpus)
        with pytest.raises(SchemaError, match="stray.tensor"):
            restore_model_weights(model, path)

    def test_shape_mismatch_rejected(self, corpus, tmp_path):
        model = build_model(corpus)
        path = str(tmp_path / "model.mvqw")
        save_model(model, path)
        other = build_model(corpus, state_dim=16, fused_dim=16)
        with pytest.raises(SchemaError):
            restore_model_weights(other, path)

    def test_load_model_requires_metadata(self, tmp_path):
        from mvqa.autodiff import Tensor

        path = str(tmp_path / "bare.mvqw")
        write_checkpoint({"w": Tensor(np.zeros(2))}, path)
        with pytest.raises(SchemaError, match="config"):
            load_model(path)

    def test_magic_constant(self):
        assert MAGIC == b"MVQW"
