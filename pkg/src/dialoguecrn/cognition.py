"""Multi-turn reasoning over a global memory.

Each turn runs one LSTM step on the current query (working memory carried
across turns), attends over the memory rows with the LSTM output, and
concatenates output and readout into the next query::

    q0 = W_q c + b_q
    q~, (h, cell) = LSTM(q, (h, cell))
    alpha = softmax_j(<g_j, q~>);  r = sum_j alpha_j g_j
    q = [q~; r]

With zero turns the loop returns ``q0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError
from .recurrent import LSTMParams, init_lstm, lstm_cell
from .tensor import Tensor, concat, masked_softmax, matmul, reshape, swapaxes


@dataclass
class ReasoningState:
    turn: int
    q: Tensor
    h: Tensor
    cell: Tensor
    last_alpha: Optional[np.ndarray] = None
    last_r: Optional[Tensor] = None
    alphas: list = field(default_factory=list)


def init_cognition(rng, d_u, level):
    prefix = f"cognition.{level}"
    lim = 1.0 / np.sqrt(2 * d_u)
    params = {
        prefix + ".w_q": Tensor(rng.uniform(-lim, lim, (2 * d_u, 4 * d_u)), requires_grad=True),
        prefix + ".b_q": Tensor(np.zeros(4 * d_u), requires_grad=True),
    }
    params.update(init_lstm(rng, prefix + ".lstm", 4 * d_u, 2 * d_u))
    return params


def initial_state(c, params, prefix):
    w_q, b_q = params[prefix + ".w_q"], params[prefix + ".b_q"]
    if c.shape[-1] != w_q.shape[0]:
        raise DimensionError(f"cognition: context extent {c.shape[-1]} vs W_q {w_q.shape}")
    q0 = c @ w_q + b_q
    zeros = Tensor(np.zeros(c.shape[:-1] + (w_q.shape[1] // 2,)))
    return ReasoningState(0, q0, zeros, zeros)


def reason_step(state, lstm):
    """One conscious-reasoning step: returns ``(q_tilde, (h, cell))``."""
    if state.q.shape[-1] != lstm.d_in:
        raise DimensionError(f"reason_step: query extent {state.q.shape[-1]} vs LSTM input {lstm.d_in}")
    h, cell = lstm_cell(state.q, state.h, state.cell, lstm)
    return h, (h, cell)


def retrieve(q_tilde, G, mask=None):
    """Dot-product attention of queries over memory rows.

    ``q_tilde`` (.., Q, 2d) or (2d,), ``G`` (.., N, 2d) or (N, 2d), ``mask``
    broadcastable to (.., N). Returns readout (.., Q, 2d) and weights (.., Q, N).
    """
    single = q_tilde.ndim == 1
    if single:
        q_tilde = reshape(q_tilde, (1, q_tilde.shape[0]))
    if q_tilde.shape[-1] != G.shape[-1]:
        raise DimensionError(f"retrieve: query {q_tilde.shape} vs memory {G.shape}")
    scores = matmul(q_tilde, swapaxes(G, -1, -2))
    key_mask = None if mask is None else np.expand_dims(np.asarray(mask, dtype=bool), -2)
    alpha = masked_softmax(scores, key_mask, axis=-1)
    r = matmul(alpha, G)
    if single:
        return reshape(r, (r.shape[-1],)), reshape(alpha, (alpha.shape[-1],))
    return r, alpha


def cognition_loop(c, G, turns, params, prefix, mask=None, trace=False):
    """Run ``turns`` retrieve/reason iterations for every row of ``c``.

    ``c`` is (.., N, 2d) (or a single (2d,) context), ``G`` the memory of the
    same conversation(s). Returns the final query (.., 4d) and, when
    ``trace``, the list of per-turn attention weight arrays.
    """
    if turns < 0:
        raise ValueError("number of turns must be non-negative")
    single = c.ndim == 1
    if single:
        c = reshape(c, (1, c.shape[0]))
    state = initial_state(c, params, prefix)
    lstm = LSTMParams.from_params(params, prefix + ".lstm")
    for t in range(1, turns + 1):
        q_tilde, (h, cell) = reason_step(state, lstm)
        r, alpha = retrieve(q_tilde, G, mask)
        state = ReasoningState(t, concat([q_tilde, r], axis=-1), h, cell, alpha.data, r, state.alphas)
        if trace:
            state.alphas.append(alpha.data)
    q = state.q
    if single:
        q = reshape(q, (q.shape[-1],))
    return (q, state.alphas) if trace else q


def fuse(q_s, q_v):
    if q_s.shape != q_v.shape:
        raise DimensionError(f"fuse: shapes {q_s.shape} and {q_v.shape} differ")
    return concat([q_s, q_v], axis=-1)
