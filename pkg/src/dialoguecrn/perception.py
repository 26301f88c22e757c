"""Perception: situation- and speaker-level context plus global memories.

All functions work on padded batches ``(B, N, d)`` with a boolean mask
``(B, N)``; a 2-D ``(N, d)`` input is treated as a single conversation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptyInputError, PartitionError
from .recurrent import bilstm, bilstm_layers, init_bilstm
from .tensor import Tensor, reshape, take


@dataclass
class PerceptionOutput:
    c_s: Tensor  # situation contexts (B, N, 2d)
    c_v: Tensor  # speaker contexts, scattered back to conversation order
    G_s: Tensor
    G_v: Tensor


def _batched(x, mask):
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), (None if mask is None else np.asarray(mask)[None]), True
    return x, mask, False


def _unbatched(x, squeeze):
    return reshape(x, x.shape[1:]) if squeeze else x


def init_perception(rng, d_u, n_layers=2, per_s=True, per_v=True):
    params = {}
    for level, enabled in (("s", per_s), ("v", per_v)):
        if enabled:
            params.update(init_bilstm(rng, f"perception.{level}", d_u, d_u, n_layers))
        else:
            params.update(_linear(rng, f"perception.{level}.proj", d_u, 2 * d_u))
        params.update(_linear(rng, f"perception.{level}.mem", 2 * d_u, 2 * d_u))
    return params


def _linear(rng, prefix, d_in, d_out):
    lim = 1.0 / np.sqrt(d_in)
    return {prefix + ".w": Tensor(rng.uniform(-lim, lim, (d_in, d_out)), requires_grad=True),
            prefix + ".b": Tensor(np.zeros(d_out), requires_grad=True)}


def situation_context(features, params, n_layers, mask=None, prefix="perception.s"):
    """Bidirectional recurrence over the whole conversation: (.., N, d) -> (.., N, 2d)."""
    x, mask, squeeze = _batched(features, mask)
    if x.shape[1] == 0:
        raise EmptyInputError("situation_context: empty conversation")
    return _unbatched(bilstm(x, mask, bilstm_layers(params, prefix, n_layers)), squeeze)


def speaker_gather_plan(partitions, n_max):
    """Index plan for running one recurrence per (conversation, speaker).

    Returns ``src`` (S, L) flat source rows into (B*n_max), the subsequence
    mask (S, L), and ``back`` (B*n_max,) mapping every global slot to its row
    in the flattened (S*L) speaker output (padding slots point at row 0).
    """
    rows = []
    for b, part in enumerate(partitions):
        part.validate()
        for idx in part.groups.values():
            rows.append([b * n_max + i for i in idx])
    L = max(len(r) for r in rows)
    src = np.zeros((len(rows), L), dtype=np.intp)
    smask = np.zeros((len(rows), L), dtype=bool)
    back = np.zeros(len(partitions) * n_max, dtype=np.intp)
    for r, row in enumerate(rows):
        src[r, :len(row)] = row
        smask[r, :len(row)] = True
        back[row] = r * L + np.arange(len(row))
    return src, smask, back


def speaker_context(features, partitions, params, n_layers, prefix="perception.v"):
    """Per-speaker bidirectional recurrence, scattered back to conversation order.

    ``partitions`` is one :class:`SpeakerPartition` per conversation (or a
    single partition for an unbatched input). Each speaker's subsequence
    starts from a zero state and never sees other speakers' turns.
    """
    if features.ndim == 2:
        partitions = [partitions]
    x, _, squeeze = _batched(features, None)
    B, N, d = x.shape
    if len(partitions) != B:
        raise PartitionError(f"{len(partitions)} partitions for a batch of {B}")
    for part in partitions:
        if part.n > N:
            raise PartitionError(f"partition covers {part.n} utterances, features have {N}")
    src, smask, back = speaker_gather_plan(partitions, N)
    S, L = src.shape
    gathered = reshape(take(reshape(x, (B * N, d)), src.reshape(-1)), (S, L, d))
    out = bilstm(gathered, smask, bilstm_layers(params, prefix, n_layers))
    H2 = out.shape[-1]
    scattered = reshape(take(reshape(out, (S * L, H2)), back), (B, N, H2))
    return _unbatched(scattered, squeeze)


def global_memory(c, w, b):
    """Row-wise affine map of context vectors: G = c W + b."""
    if c.shape[-1] != w.shape[0] or w.shape[1] != b.shape[-1]:
        raise DimensionError(f"global_memory: contexts {c.shape}, W {w.shape}, b {b.shape}")
    return c @ w + b


def perceive(features, mask, partitions, params, n_layers, per_s=True, per_v=True):
    """Both context levels and their global memories for a padded batch.

    A disabled level substitutes a learned projection of the raw features
    so every downstream extent stays 2d.
    """
    x, mask, squeeze = _batched(features, mask)
    if features.ndim == 2:
        partitions = [partitions]
    if per_s:
        c_s = situation_context(x, params, n_layers, mask, "perception.s")
    else:
        c_s = x @ params["perception.s.proj.w"] + params["perception.s.proj.b"]
    if per_v:
        c_v = speaker_context(x, partitions, params, n_layers, "perception.v")
    else:
        c_v = x @ params["perception.v.proj.w"] + params["perception.v.proj.b"]
    G_s = global_memory(c_s, params["perception.s.mem.w"], params["perception.s.mem.b"])
    G_v = global_memory(c_v, params["perception.v.mem.w"], params["perception.v.mem.b"])
    return PerceptionOutput(*(_unbatched(t, squeeze) for t in (c_s, c_v, G_s, G_v)))
