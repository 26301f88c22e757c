import numpy as np
import pytest
from hypothesis import settings

from dialoguecrn.corpus import Conversation, EmbeddingTable, Utterance
from dialoguecrn.model import ModelConfig

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")

WORDS = ["the", "cat", "sat", "on", "mat", "dog", "ran", "far", "away", "home"]


def tiny_config(**overrides):
    """A model small enough for exhaustive finite-difference checks."""
    base = dict(n_outputs=3, d_u=4, embedding_dim=5, n_maps=2, widths=(3, 4, 5), layers=1,
                turns_s=2, turns_v=2, dropout=0.0, init_seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def make_table(dimension=5, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(dimension, WORDS, rng.normal(size=(len(WORDS), dimension)))


def make_conv(conv_id, speakers, seed=0, n_classes=3, roster=None):
    """Token conversation with random words and labels for the given speaker turns."""
    rng = np.random.default_rng(seed)
    utts = []
    for s in speakers:
        n = int(rng.integers(2, 8))
        tokens = tuple(WORDS[k] for k in rng.integers(0, len(WORDS), n))
        utts.append(Utterance(s, tokens=tokens, label=int(rng.integers(0, n_classes))))
    return Conversation(conv_id, tuple(utts), tuple(roster or sorted(set(speakers))))


@pytest.fixture
def table():
    return make_table()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
