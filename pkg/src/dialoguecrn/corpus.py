"""Conversation corpora, embedding tables and speaker partitions.

Corpus files hold one JSON record per line::

    {"id": "c1", "speakers": ["A", "B"],
     "utterances": [{"speaker": "A", "tokens": ["hi"], "label": 2}, ...]}

Utterances carry either ``tokens`` or a precomputed ``feature`` vector, and
either a categorical ``label`` or continuous ``attrs``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, PartitionError, SchemaError


@dataclass(frozen=True)
class Schema:
    kind: str  # "categorical" | "continuous"
    size: int  # number of classes or attributes

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise ValueError(f"unknown schema kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("schema size must be positive")


def categorical(n_classes):
    return Schema("categorical", n_classes)


def continuous(n_attrs):
    return Schema("continuous", n_attrs)


@dataclass(frozen=True)
class Utterance:
    speaker: str
    tokens: Optional[tuple] = None
    feature: Optional[tuple] = None
    label: Optional[int] = None
    attrs: Optional[tuple] = None

    def __post_init__(self):
        if (self.tokens is None) == (self.feature is None):
            raise SchemaError("utterance needs exactly one of 'tokens' / 'feature'")
        if self.label is not None and self.attrs is not None:
            raise SchemaError("utterance has both 'label' and 'attrs'")


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple
    speakers: tuple  # roster

    def __post_init__(self):
        if not self.utterances:
            raise SchemaError(f"conversation {self.id!r} has no utterances")
        if not self.speakers:
            raise SchemaError(f"conversation {self.id!r} has an empty speaker roster")
        roster = set(self.speakers)
        for i, u in enumerate(self.utterances):
            if u.speaker not in roster:
                raise SchemaError(f"conversation {self.id!r} utterance {i}: "
                                  f"speaker {u.speaker!r} not in roster")

    def __len__(self):
        return len(self.utterances)

    @property
    def turn_speakers(self):
        """Speaker of each utterance, in conversation order."""
        return [u.speaker for u in self.utterances]

    @property
    def labels(self):
        return [u.label for u in self.utterances]


# records --------------------------------------------------------------------

def _utterance_from_record(rec, schema, line):
    if not isinstance(rec, dict):
        raise SchemaError("utterance must be an object", line)
    if "speaker" not in rec:
        raise SchemaError("utterance lacks field 'speaker'", line)
    tokens = rec.get("tokens")
    feature = rec.get("feature")
    if (tokens is None) == (feature is None):
        raise SchemaError("utterance needs exactly one of fields 'tokens' / 'feature'", line)
    if tokens is not None:
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise SchemaError("field 'tokens' must be an array of strings", line)
        tokens = tuple(tokens)
    else:
        feature = tuple(float(v) for v in feature)

    label = attrs = None
    if schema.kind == "categorical":
        if "label" not in rec:
            raise SchemaError("utterance lacks field 'label'", line)
        label = rec["label"]
        if not isinstance(label, int) or isinstance(label, bool):
            raise SchemaError(f"label {label!r} is not an integer", line)
        if not 0 <= label < schema.size:
            raise SchemaError(f"label {label} out of range [0, {schema.size})", line)
    else:
        if "attrs" not in rec:
            raise SchemaError("utterance lacks field 'attrs'", line)
        attrs = tuple(float(v) for v in rec["attrs"])
        if len(attrs) != schema.size:
            raise SchemaError(f"expected {schema.size} attrs, got {len(attrs)}", line)
    return Utterance(str(rec["speaker"]), tokens, feature, label, attrs)


def conversation_from_record(rec, schema, line=None):
    for key in ("id", "speakers", "utterances"):
        if key not in rec:
            raise SchemaError(f"record lacks field '{key}'", line)
    utts = tuple(_utterance_from_record(u, schema, line) for u in rec["utterances"])
    try:
        return Conversation(str(rec["id"]), utts, tuple(str(s) for s in rec["speakers"]))
    except SchemaError as exc:
        raise SchemaError(str(exc), line) from None


def conversation_to_record(conv):
    utts = []
    for u in conv.utterances:
        rec = {"speaker": u.speaker}
        if u.tokens is not None:
            rec["tokens"] = list(u.tokens)
        else:
            rec["feature"] = list(u.feature)
        if u.label is not None:
            rec["label"] = u.label
        if u.attrs is not None:
            rec["attrs"] = list(u.attrs)
        utts.append(rec)
    return {"id": conv.id, "speakers": list(conv.speakers), "utterances": utts}


def load_corpus(path, schema):
    """Read and validate a line-delimited corpus; order follows the file."""
    convs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed record: {exc.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", lineno)
            convs.append(conversation_from_record(rec, schema, lineno))
    return convs


def save_corpus(convs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for conv in convs:
            fh.write(json.dumps(conversation_to_record(conv), ensure_ascii=False) + "\n")


def infer_schema(convs):
    """Smallest schema consistent with the labels present (used by the CLI)."""
    first = convs[0].utterances[0]
    if first.attrs is not None:
        return continuous(len(first.attrs))
    return categorical(1 + max(u.label for c in convs for u in c.utterances))


def split_train_val(convs, seed, val_fraction=0.2):
    """Seeded shuffle, then hold out ``val_fraction`` of the conversations."""
    order = np.random.default_rng(seed).permutation(len(convs))
    n_val = int(round(val_fraction * len(convs)))
    if len(convs) > 1:
        n_val = min(max(n_val, 1), len(convs) - 1)
    val = [convs[i] for i in order[:n_val]]
    train = [convs[i] for i in order[n_val:]]
    return train, val


# embeddings -----------------------------------------------------------------

def tokenize(text):
    return text.lower().split()


class EmbeddingTable:
    """Frozen word vectors. Lookups lowercase the token; misses give zeros."""

    def __init__(self, dimension, words=(), vectors=None):
        self.dimension = int(dimension)
        self.index = {}
        rows = []
        vectors = [] if vectors is None else vectors
        for w, v in zip(words, vectors):
            if w in self.index:
                continue
            v = np.asarray(v, dtype=float)
            if v.shape != (self.dimension,):
                raise ValueError(f"vector for {w!r} has extent {v.size}, expected {self.dimension}")
            self.index[w] = len(rows)
            rows.append(v)
        # trailing zero row serves every out-of-vocabulary token
        self.matrix = np.vstack(rows + [np.zeros(self.dimension)])

    def __len__(self):
        return len(self.index)

    def __contains__(self, word):
        return word in self.index

    @property
    def oov_index(self):
        return len(self.index)

    def indices(self, tokens):
        get = self.index.get
        oov = self.oov_index
        return np.array([get(t.lower(), get(t, oov)) for t in tokens], dtype=np.intp)

    def lookup(self, token):
        return self.matrix[self.indices([token])[0]]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for w, i in self.index.items():
                fh.write(w + " " + " ".join(repr(float(v)) for v in self.matrix[i]) + "\n")


def load_embeddings(path, dimension=300):
    """Parse ``word v1 ... vd`` lines; the first occurrence of a word wins."""
    words, vectors = [], []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if len(parts) != dimension + 1:
                raise ParseError(f"expected {dimension} values, got {len(parts) - 1}", lineno)
            word = parts[0]
            try:
                vec = [float(v) for v in parts[1:]]
            except ValueError:
                raise ParseError("non-numeric vector component", lineno) from None
            if word in seen:
                continue
            seen.add(word)
            words.append(word)
            vectors.append(vec)
    return EmbeddingTable(dimension, words, vectors)


# speaker partitions -------------------------------------------------------

@dataclass(frozen=True)
class SpeakerPartition:
    """Global utterance indices per speaker, speakers in order of first turn."""

    groups: dict
    n: int

    def validate(self):
        seen = []
        for speaker, idx in self.groups.items():
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise PartitionError(f"indices of speaker {speaker!r} are not increasing")
            seen.extend(idx)
        if sorted(seen) != list(range(self.n)):
            raise PartitionError(f"partition does not cover [0, {self.n}) exactly once")
        return self


def partition_by_speaker(conv):
    groups = {}
    for i, s in enumerate(conv.turn_speakers):
        groups.setdefault(s, []).append(i)
    return SpeakerPartition({s: tuple(v) for s, v in groups.items()}, len(conv))


def scatter(partition, items_by_speaker):
    """Inverse of gathering per speaker: place items back at global positions."""
    out = [None] * partition.n
    for speaker, idx in partition.groups.items():
        for i, item in zip(idx, items_by_speaker[speaker]):
            out[i] = item
    return out
