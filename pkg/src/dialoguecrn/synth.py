"""Synthetic corpora whose labels can only be read off the context.

Every utterance carries filler words plus exactly one clue word ``clue<k>``.
The label of utterance i is the clue index of a designated earlier
utterance: the immediately preceding one (``situation``) or the same
speaker's previous turn (``speaker``). Utterances with no such predecessor
get ``START_LABEL``. An utterance's own words are drawn independently of its
label, so a context-free reader can only guess.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Conversation, EmbeddingTable, Utterance
from .errors import GenerationError

START_LABEL = 0


@dataclass(frozen=True)
class SynthSpec:
    n_conversations: int = 10
    length: int = 12
    n_speakers: int = 2
    clue_kind: str = "situation"
    vocab_size: int = 50
    seed: int = 0
    n_classes: int = 4
    min_tokens: int = 3
    max_tokens: int = 7


def clue_word(k):
    return f"clue{k}"


def filler_word(k):
    return f"w{k}"


def _speaker_sequence(rng, spec):
    if spec.clue_kind == "speaker":
        # every speaker needs a first turn and at least one turn after it
        if spec.length < 2 * spec.n_speakers:
            raise GenerationError(
                f"length {spec.length} too short for {spec.n_speakers} speakers to each "
                "have a prior turn")
        while True:
            seq = rng.integers(0, spec.n_speakers, spec.length)
            if np.all(np.bincount(seq, minlength=spec.n_speakers) >= 2):
                return seq
    return rng.integers(0, spec.n_speakers, spec.length)


def clue_source(speakers, i, clue_kind):
    """Index of the utterance whose clue labels utterance ``i`` (or None)."""
    if clue_kind == "situation":
        return i - 1 if i > 0 else None
    for j in range(i - 1, -1, -1):
        if speakers[j] == speakers[i]:
            return j
    return None


def synth_generate(spec):
    if spec.length < 2:
        raise GenerationError("length must be at least 2")
    if spec.n_speakers < 1:
        raise GenerationError("need at least one speaker")
    if spec.clue_kind not in ("situation", "speaker"):
        raise GenerationError(f"unknown clue kind {spec.clue_kind!r}")
    rng = np.random.default_rng(spec.seed)
    roster = tuple(f"p{k}" for k in range(spec.n_speakers))
    convs = []
    for c in range(spec.n_conversations):
        speakers = _speaker_sequence(rng, spec)
        clues = rng.integers(0, spec.n_classes, spec.length)
        utts = []
        for i in range(spec.length):
            n_fill = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
            words = [filler_word(k) for k in rng.integers(0, spec.vocab_size, n_fill)]
            words.insert(int(rng.integers(0, n_fill + 1)), clue_word(int(clues[i])))
            src = clue_source(speakers, i, spec.clue_kind)
            label = START_LABEL if src is None else int(clues[src])
            utts.append(Utterance(roster[speakers[i]], tokens=tuple(words), label=label))
        convs.append(Conversation(f"{spec.clue_kind}-{spec.seed}-{c}", tuple(utts), roster))
    return convs


def synth_embeddings(spec, dimension, seed=None):
    """Gaussian vectors for every filler and clue word of ``spec``."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    words = [filler_word(k) for k in range(spec.vocab_size)] + \
            [clue_word(k) for k in range(spec.n_classes)]
    vecs = rng.normal(0.0, 1.0 / np.sqrt(dimension), (len(words), dimension))
    return EmbeddingTable(dimension, words, vecs)
