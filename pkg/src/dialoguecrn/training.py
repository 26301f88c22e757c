"""Adam with coupled L2 decay, early stopping on validation loss, checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import CheckpointFormatError, ConfigError, EmptyInputError, NonFiniteLossError, OptimizerError
from .tensor import Tape, backward, no_grad

log = logging.getLogger(__name__)

PRESETS = {
    "iemocap": {"learning_rate": 1e-4, "weight_decay": 2e-4},
    "semaine": {"learning_rate": 1e-3, "weight_decay": 5e-4},
    "meld": {"learning_rate": 1e-3, "weight_decay": 5e-4},
}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.epsilon <= 0:
            raise ConfigError("learning rate and epsilon must be positive, weight decay non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if not 0 < self.patience < self.max_epochs:
            raise ConfigError(f"patience {self.patience} must lie in (0, max_epochs={self.max_epochs})")

    @classmethod
    def preset(cls, name, **overrides):
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, config):
    """In-place Adam update of ``params`` (name -> Tensor) from their ``.grad``.

    L2 decay is coupled: ``g <- g + weight_decay * theta`` before the moments.
    """
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return params, state


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` stale epochs."""

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, val_loss):
        self.epoch += 1
        if val_loss < self.best:
            self.best, self.best_epoch = val_loss, self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self):
        return self.best_epoch == self.epoch


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    metrics: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    best_params: dict
    best_epoch: int
    stopped_epoch: int
    history: list
    optimizer: OptimizerState


def _batches(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


def dataset_loss(model, convs, batch_size=32):
    """Utterance-weighted mean loss over ``convs`` without dropout or recording."""
    total, count = 0.0, 0
    with no_grad():
        for batch in _batches(list(convs), batch_size):
            n = sum(len(c) for c in batch)
            total += model.loss(batch).item() * n
            count += n
    return total / count


def train(model, train_set, val_set, config, metrics_fn=None, on_epoch=None):
    """Fit ``model`` in place and return the lowest-validation-loss snapshot.

    Each epoch shuffles whole conversations with a seeded permutation.
    ``metrics_fn(model, val_set) -> dict`` adds validation metrics to the
    history; ``on_epoch(record)`` is called after every epoch.
    """
    if not train_set or not val_set:
        raise ConfigError("training and validation splits must be non-empty")
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(rng.integers(2**63))
    state = OptimizerState()
    stopper = EarlyStopping(config.patience)
    history = []
    best = {k: p.data.copy() for k, p in model.params.items()}

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for batch in _batches([train_set[i] for i in order], config.batch_size):
            for p in model.params.values():
                p.grad = None
            with Tape():
                loss = model.loss(batch, training=True, rng=drop_rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteLossError(f"non-finite training loss at epoch {epoch}")
                backward(loss)
            touched = {k: p for k, p in model.params.items() if p.grad is not None}
            adam_step(touched, state, config)
            n = sum(len(c) for c in batch)
            total += value * n
            count += n
        val_loss = dataset_loss(model, val_set, config.batch_size)
        if not np.isfinite(val_loss):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}")
        record = EpochRecord(epoch, total / count, val_loss,
                             metrics_fn(model, val_set) if metrics_fn else {})
        history.append(record)
        stop = stopper.update(val_loss)
        if stopper.improved:
            best = {k: p.data.copy() for k, p in model.params.items()}
        log.debug("epoch %d train %.4f val %.4f", epoch, record.train_loss, val_loss)
        if on_epoch:
            on_epoch(record)
        if stop:
            break
    model.load_state_dict(best)
    return TrainResult(best, stopper.best_epoch, stopper.epoch, history, state)


def history_csv(history):
    keys = sorted({k for r in history for k in r.metrics})
    lines = [",".join(["epoch", "train_loss", "val_loss"] + keys)]
    for r in history:
        vals = [str(r.epoch), repr(r.train_loss), repr(r.val_loss)]
        vals += [repr(r.metrics.get(k, float("nan"))) for k in keys]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# checkpoints ----------------------------------------------------------------

MAGIC = b"CRNCKPT\x00"
VERSION = 1


def _write_block(fh, name, arr):
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)) + raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def save_checkpoint(path, params, config=None, optimizer=None):
    """Versioned binary container: header JSON, then named float64 blocks.

    ``params`` maps names to Tensors or arrays; ``config`` is any JSON-able
    snapshot; optimizer moments are stored as ``adam.m.*`` / ``adam.v.*``.
    """
    blocks = [(k, getattr(p, "data", p)) for k, p in params.items()]
    header = {"config": config or {}, "params": [k for k, _ in blocks], "adam_step": 0}
    if optimizer is not None:
        header["adam_step"] = optimizer.step
        blocks += [(f"adam.m.{k}", a) for k, a in optimizer.m.items()]
        blocks += [(f"adam.v.{k}", a) for k, a in optimizer.v.items()]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(head)) + head)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            _write_block(fh, name, arr)


@dataclass
class Checkpoint:
    params: dict
    config: dict
    optimizer: OptimizerState


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError("checkpoint is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(f"checkpoint version {version}, this build reads {VERSION}")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointFormatError("corrupt checkpoint header") from None
    (n_blocks,) = r.unpack("<I")
    blocks = {}
    for _ in range(n_blocks):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        blocks[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.raw):
        raise CheckpointFormatError("trailing bytes after the last block")
    opt = OptimizerState(step=header.get("adam_step", 0))
    params = {}
    for name, arr in blocks.items():
        if name.startswith("adam.m."):
            opt.m[name[7:]] = arr
        elif name.startswith("adam.v."):
            opt.v[name[7:]] = arr
        else:
            params[name] = arr
    return Checkpoint(params, header.get("config", {}), opt)
