"""End-to-end model: encoder -> perception -> cognition -> classifier.

Conversations are processed as right-padded batches with a mask; padded
positions never reach the loss, attention supports or outputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .cognition import cognition_loop, fuse, init_cognition
from .corpus import partition_by_speaker
from .encoder import WIDTHS, encode_utterances, init_encoder
from .errors import ConfigError, DimensionError, EmptyInputError, WrongHeadError
from .perception import init_perception, perceive
from .tensor import Tensor, concat, dropout, exp, log_softmax, no_grad, reshape, tabs, take

LEVELS = ("s", "v")


@dataclass
class ModelConfig:
    n_outputs: int = 6  # |Y| for categorical heads, k attributes for regression
    head: str = "categorical"
    d_u: int = 100
    embedding_dim: int = 300
    n_maps: int = 50
    widths: tuple = WIDTHS
    encoder: bool = True
    layers: int = 2
    turns_s: int = 2
    turns_v: int = 2
    cog_s: bool = True
    cog_v: bool = True
    per_s: bool = True
    per_v: bool = True
    dropout: float = 0.2
    init_seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.head not in ("categorical", "regression"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.turns_s < 0 or self.turns_v < 0:
            raise ConfigError("turn counts must be non-negative")
        if self.n_outputs < 1 or self.d_u < 1 or self.layers < 1:
            raise ConfigError("n_outputs, d_u and layers must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def effective_turns(self):
        return {"s": self.turns_s if self.cog_s else 0,
                "v": self.turns_v if self.cog_v else 0}

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def init_params(config):
    """Fresh parameters in a fixed creation order, seeded by ``init_seed``."""
    rng = np.random.default_rng(config.init_seed)
    d = config.d_u
    params = {}
    if config.encoder:
        params.update(init_encoder(rng, d, config.embedding_dim, config.n_maps, config.widths))
    params.update(init_perception(rng, d, config.layers, config.per_s, config.per_v))
    for level in LEVELS:
        params.update(init_cognition(rng, d, level))
    lim = 1.0 / np.sqrt(8 * d)
    params["classifier.w"] = Tensor(rng.uniform(-lim, lim, (8 * d, config.n_outputs)), requires_grad=True)
    params["classifier.b"] = Tensor(np.zeros(config.n_outputs), requires_grad=True)
    for name, p in params.items():
        p.name = name
    return params


@dataclass
class ForwardOutput:
    outputs: Tensor  # (B, N, K): probabilities or attribute predictions
    log_probs: Tensor | None  # (B, N, K) for categorical heads
    mask: np.ndarray  # (B, N)
    lengths: list
    trace: list  # attention records, empty unless requested

    def per_conversation(self):
        return [self.outputs.data[b, :n] for b, n in enumerate(self.lengths)]


class DialogueCRN:
    """Model parameters plus the frozen embedding table they read from."""

    def __init__(self, config, table=None, params=None):
        self.config = config
        self.table = table
        self.params = init_params(config) if params is None else params
        if table is not None and config.encoder and table.dimension != config.embedding_dim:
            raise DimensionError(
                f"embedding table has dimension {table.dimension}, config expects {config.embedding_dim}")

    # ------------------------------------------------------------------
    def _features(self, convs, training, rng):
        cfg = self.config
        lengths = [len(c) for c in convs]
        B, N = len(convs), max(lengths)
        flat = [u for c in convs for u in c.utterances]
        if not cfg.encoder and any(u.tokens is not None for u in flat):
            raise ConfigError("model was built without an encoder but received token utterances")
        rows = encode_utterances(flat, self.table, self.params, cfg.d_u, training, rng, cfg.dropout)
        mask = np.zeros((B, N), dtype=bool)
        slots = np.full(B * N, len(flat), dtype=np.intp)  # padding -> appended zero row
        offset = 0
        for b, n in enumerate(lengths):
            mask[b, :n] = True
            slots[b * N: b * N + n] = offset + np.arange(n)
            offset += n
        padded = concat([rows, Tensor(np.zeros((1, cfg.d_u)))], axis=0)
        return reshape(take(padded, slots), (B, N, cfg.d_u)), mask, lengths

    def forward(self, convs, training=False, rng=None, trace=False):
        """Run the model on one conversation or a list of them."""
        if not isinstance(convs, (list, tuple)):
            convs = [convs]
        if not convs:
            raise EmptyInputError("forward needs at least one conversation")
        cfg = self.config
        if training and cfg.dropout > 0 and rng is None:
            rng = np.random.default_rng(0)
        u, mask, lengths = self._features(convs, training, rng)
        partitions = [partition_by_speaker(c) for c in convs]
        per = perceive(u, mask, partitions, self.params, cfg.layers, cfg.per_s, cfg.per_v)
        turns = cfg.effective_turns
        records = []
        queries = {}
        for level, c, G in (("s", per.c_s, per.G_s), ("v", per.c_v, per.G_v)):
            q, alphas = cognition_loop(c, G, turns[level], self.params, f"cognition.{level}",
                                       mask, trace=True)
            queries[level] = q
            if trace:
                records.extend(_trace_records(convs, lengths, level, alphas))
        o = dropout(fuse(queries["s"], queries["v"]), cfg.dropout, rng, training)
        logits = o @ self.params["classifier.w"] + self.params["classifier.b"]
        if cfg.head == "categorical":
            log_probs = log_softmax(logits, axis=-1)
            return ForwardOutput(exp(log_probs), log_probs, mask, lengths, records)
        return ForwardOutput(logits, None, mask, lengths, records)

    __call__ = forward

    # ------------------------------------------------------------------
    def batch_loss(self, convs, training=False, rng=None):
        """Cross entropy summed over every real utterance / total utterance count."""
        if self.config.head != "categorical":
            raise WrongHeadError("batch_loss needs a categorical head; use regression_loss")
        out = self.forward(convs, training, rng)
        b_idx, n_idx = np.nonzero(out.mask)
        gold = np.array([convs[b].utterances[n].label for b, n in zip(b_idx, n_idx)])
        picked = out.log_probs[b_idx, n_idx, gold]
        return picked.sum() * (-1.0 / len(gold))

    def regression_loss(self, convs, training=False, rng=None):
        """Mean absolute error over every real utterance and attribute."""
        if self.config.head != "regression":
            raise WrongHeadError("regression_loss needs a regression head; use batch_loss")
        out = self.forward(convs, training, rng)
        b_idx, n_idx = np.nonzero(out.mask)
        target = np.array([convs[b].utterances[n].attrs for b, n in zip(b_idx, n_idx)], dtype=float)
        diff = out.outputs[b_idx, n_idx] - Tensor(target)
        return tabs(diff).sum() * (1.0 / target.size)

    def loss(self, convs, training=False, rng=None):
        if self.config.head == "categorical":
            return self.batch_loss(convs, training, rng)
        return self.regression_loss(convs, training, rng)

    def predict(self, conv):
        """Argmax labels (lowest index on ties) or attribute vectors."""
        with no_grad():
            out = self.forward([conv]).per_conversation()[0]
        if self.config.head == "categorical":
            return argmax(out)
        return out

    def state_dict(self):
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, arrays):
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise DimensionError(f"{k}: stored shape {arrays[k].shape} vs model {p.shape}")
            p.data = np.array(arrays[k], dtype=p.data.dtype)


def argmax(probs):
    """Row-wise argmax; numpy already returns the first maximal index."""
    return np.argmax(np.asarray(probs), axis=-1)


def _trace_records(convs, lengths, level, alphas):
    records = []
    for t, alpha in enumerate(alphas, 1):
        for b, (conv, n) in enumerate(zip(convs, lengths)):
            for i in range(n):
                records.append({"conversation_id": conv.id, "utterance_index": i,
                                "level": level, "turn": t,
                                "weights": alpha[b, i, :n].tolist()})
    return records
