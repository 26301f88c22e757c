"""Contextual reasoning networks for emotion recognition in conversations.

A numpy-only implementation: a small reverse-mode autodiff core, a CNN
utterance encoder, situation- and speaker-level perception, multi-turn
cognition over global memories, training, evaluation and a CLI.
"""

__version__ = "0.1.0"

from .corpus import Conversation, EmbeddingTable, Utterance, load_corpus, load_embeddings
from .model import DialogueCRN, ModelConfig
from .synth import SynthSpec, synth_embeddings, synth_generate
from .training import TrainConfig, train

__all__ = [
    "Conversation", "DialogueCRN", "EmbeddingTable", "ModelConfig", "SynthSpec",
    "TrainConfig", "Utterance", "load_corpus", "load_embeddings", "synth_embeddings",
    "synth_generate", "train",
]
