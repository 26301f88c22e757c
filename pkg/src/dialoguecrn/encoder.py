"""Context-free utterance features: n-gram convolutions over frozen embeddings.

Per filter width: valid convolution -> max over time -> ReLU. The pooled
maps of all widths are concatenated and projected to ``d_u``; dropout
follows the projection when training.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, EmptyInputError
from .tensor import Tensor, concat, dropout, masked_max, relu, reshape, take

WIDTHS = (3, 4, 5)


def init_encoder(rng, d_u, embedding_dim=300, n_maps=50, widths=WIDTHS):
    params = {}
    for w in widths:
        fan_in = w * embedding_dim
        lim = 1.0 / np.sqrt(fan_in)
        params[f"encoder.conv{w}.w"] = Tensor(rng.uniform(-lim, lim, (fan_in, n_maps)), requires_grad=True)
        params[f"encoder.conv{w}.b"] = Tensor(np.zeros(n_maps), requires_grad=True)
    fan_in = len(widths) * n_maps
    lim = 1.0 / np.sqrt(fan_in)
    params["encoder.proj.w"] = Tensor(rng.uniform(-lim, lim, (fan_in, d_u)), requires_grad=True)
    params["encoder.proj.b"] = Tensor(np.zeros(d_u), requires_grad=True)
    return params


def encoder_widths(params):
    return tuple(sorted(int(k[len("encoder.conv"):-2]) for k in params
                        if k.startswith("encoder.conv") and k.endswith(".w")))


def windows(token_lists, table, width, min_len):
    """Constant sliding-window matrix (M, P, width*E) and its validity mask (M, P).

    Utterances are right-padded with zero vectors to ``max(min_len, longest)``;
    window p of utterance m is valid iff it lies within ``max(len_m, min_len)``.
    """
    E = table.dimension
    lengths = np.array([max(len(t), min_len) for t in token_lists])
    L = int(lengths.max())
    idx = np.full((len(token_lists), L), table.oov_index, dtype=np.intp)
    for m, toks in enumerate(token_lists):
        idx[m, :len(toks)] = table.indices(toks)
    emb = table.matrix[idx]  # (M, L, E); OOV and padding rows are zero
    P = L - width + 1
    win = np.lib.stride_tricks.sliding_window_view(emb, width, axis=1)  # (M, P, E, w)
    win = np.ascontiguousarray(np.swapaxes(win, 2, 3)).reshape(len(token_lists), P, width * E)
    valid = np.arange(P)[None, :] + width <= lengths[:, None]
    return win, valid


def encode_tokens(token_lists, table, params, training=False, rng=None, dropout_rate=0.2):
    """Encode M token lists at once; returns Tensor (M, d_u)."""
    if any(len(t) == 0 for t in token_lists):
        raise EmptyInputError("cannot encode an empty utterance")
    widths = encoder_widths(params)
    expected = params[f"encoder.conv{widths[0]}.w"].shape[0] // widths[0]
    if table.dimension != expected:
        raise DimensionError(f"embedding dimension {table.dimension} vs encoder input {expected}")
    pooled = []
    for w in widths:
        win, valid = windows(token_lists, table, w, max(widths))
        conv = Tensor(win) @ params[f"encoder.conv{w}.w"] + params[f"encoder.conv{w}.b"]
        pooled.append(relu(masked_max(conv, valid[:, :, None], axis=1)))
    feats = concat(pooled, axis=-1) @ params["encoder.proj.w"] + params["encoder.proj.b"]
    return dropout(feats, dropout_rate, rng, training)


def encode_utterance(tokens, table, params, training=False, rng=None, dropout_rate=0.2):
    out = encode_tokens([list(tokens)], table, params, training, rng, dropout_rate)
    return reshape(out, (out.shape[-1],))


def encode_utterances(utterances, table, params, d_u, training=False, rng=None, dropout_rate=0.2):
    """Features for a flat list of utterances -> Tensor (M, d_u).

    Token utterances go through the convolutional encoder; precomputed
    features bypass it and must already have extent ``d_u``.
    """
    tok_pos = [i for i, u in enumerate(utterances) if u.tokens is not None]
    feat_pos = [i for i, u in enumerate(utterances) if u.tokens is None]
    for i in feat_pos:
        if len(utterances[i].feature) != d_u:
            raise DimensionError(
                f"precomputed feature has extent {len(utterances[i].feature)}, expected {d_u}")
    parts, order = [], np.empty(len(utterances), dtype=np.intp)
    if tok_pos:
        if table is None:
            raise ValueError("token utterances need an embedding table")
        parts.append(encode_tokens([utterances[i].tokens for i in tok_pos], table, params,
                                   training, rng, dropout_rate))
    if feat_pos:
        parts.append(Tensor(np.array([utterances[i].feature for i in feat_pos], dtype=float)))
    if len(parts) == 1:
        return parts[0]
    order[tok_pos] = np.arange(len(tok_pos))
    order[feat_pos] = len(tok_pos) + np.arange(len(feat_pos))
    return take(concat(parts, axis=0), order, axis=0)


def encode_conversation(conv, table, params, d_u, training=False, rng=None, dropout_rate=0.2):
    """Per-utterance feature vectors of one conversation (list of Tensor[d_u])."""
    feats = encode_utterances(conv.utterances, table, params, d_u, training, rng, dropout_rate)
    return [feats[i] for i in range(len(conv))]
