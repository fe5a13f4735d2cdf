"""Shared fixtures: a desk-scale corpus on disk and model builders."""

import numpy as np
import pytest

from mvqa.config import TrainConfig
from mvqa.data import build_answer_vocabulary, load_dataset
from mvqa.encoders import Vocabulary
from mvqa.fixtures import make_fixture
from mvqa.model import VqaModel


def desk_config(**overrides):
    cfg = TrainConfig().desk_scale()
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg.validate()


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """A clean desk-scale corpus shared by the whole session (read-only)."""
    root = tmp_path_factory.mktemp("corpus")
    make_fixture(str(root), seed=0)
    return root


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    samples = load_dataset(str(corpus_dir / "dataset.json"), strict=True)
    answer_vocab = build_answer_vocabulary(samples)
    question_vocab = Vocabulary.from_texts(s.question for s in samples)
    return {"dir": corpus_dir, "samples": samples,
            "answers": answer_vocab, "questions": question_vocab}


def build_model(corpus, dtype=np.float32, **overrides):
    cfg = desk_config(**overrides)
    return VqaModel(cfg, corpus["questions"], corpus["answers"], dtype=dtype)
