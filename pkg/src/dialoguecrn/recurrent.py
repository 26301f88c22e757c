"""LSTM cell and (stacked) bidirectional recurrence over padded batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptyInputError
from .tensor import Tensor, concat, reshape, sigmoid, stack, tanh


@dataclass(frozen=True)
class LSTMParams:
    """Weights of one LSTM direction, row-vector convention (``x @ w_ih``).

    Gate blocks along the last axis are ordered input, forget, output,
    candidate so the three sigmoid gates form one contiguous slice.
    """

    w_ih: Tensor  # (d_in, 4h)
    w_hh: Tensor  # (h, 4h)
    b: Tensor  # (4h,)

    @property
    def hidden(self):
        return self.w_hh.shape[0]

    @property
    def d_in(self):
        return self.w_ih.shape[0]

    @classmethod
    def from_params(cls, params, prefix):
        return cls(params[prefix + ".w_ih"], params[prefix + ".w_hh"], params[prefix + ".b"])


def init_lstm(rng, prefix, d_in, hidden):
    """Uniform(+-1/sqrt(fan_in)) matrices, zero biases, forget-gate bias 1."""
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    lim_i, lim_h = 1.0 / np.sqrt(d_in), 1.0 / np.sqrt(hidden)
    return {
        prefix + ".w_ih": Tensor(rng.uniform(-lim_i, lim_i, (d_in, 4 * hidden)), requires_grad=True),
        prefix + ".w_hh": Tensor(rng.uniform(-lim_h, lim_h, (hidden, 4 * hidden)), requires_grad=True),
        prefix + ".b": Tensor(b, requires_grad=True),
    }


def lstm_cell(x, h_prev, c_prev, p, x_proj=None):
    """One LSTM step. Returns ``(h, c)``.

    ``x_proj`` lets callers pass a precomputed ``x @ w_ih + b`` (the
    sequence runners do this once for every time step).
    """
    H = p.hidden
    if h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise DimensionError(
            f"lstm_cell: state shapes {h_prev.shape}/{c_prev.shape} vs hidden size {H}")
    if x_proj is None:
        if x.shape[-1] != p.d_in:
            raise DimensionError(f"lstm_cell: input shape {x.shape} vs w_ih {p.w_ih.shape}")
        x_proj = x @ p.w_ih + p.b
    gates = x_proj + h_prev @ p.w_hh
    sig = sigmoid(gates[..., :3 * H])
    i, f, o = sig[..., :H], sig[..., H:2 * H], sig[..., 2 * H:]
    g = tanh(gates[..., 3 * H:])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def run_direction(x, mask, p, reverse=False):
    """Unidirectional recurrence over ``x`` of shape (B, N, d).

    ``mask`` (B, N) marks real positions; at masked positions the state is
    carried through unchanged, so right-padding never leaks into the
    backward direction. Returns hidden states (B, N, h).
    """
    B, N = x.shape[0], x.shape[1]
    H = p.hidden
    xw = x @ p.w_ih + p.b
    h = c = Tensor(np.zeros((B, H)))
    outs = [None] * N
    for t in (range(N - 1, -1, -1) if reverse else range(N)):
        h_new, c_new = lstm_cell(None, h, c, p, x_proj=xw[:, t])
        if mask is not None and not mask[:, t].all():
            m = mask[:, t, None].astype(float)
            h = h_new * m + h * (1.0 - m)
            c = c_new * m + c * (1.0 - m)
        else:
            h, c = h_new, c_new
        outs[t] = h
    return stack(outs, axis=1)


def bilstm(x, mask, layers):
    """Stacked bidirectional LSTM; ``layers`` is a list of (forward, backward) params.

    Layer k+1 consumes the concatenated 2h outputs of layer k.
    """
    if x.shape[1] == 0:
        raise EmptyInputError("bilstm: empty sequence")
    out = x
    for fw, bw in layers:
        if out.shape[-1] != fw.d_in:
            raise DimensionError(f"bilstm: input extent {out.shape[-1]} vs layer input {fw.d_in}")
        out = concat([run_direction(out, mask, fw), run_direction(out, mask, bw, reverse=True)], axis=-1)
    return out


def bilstm_sequence(inputs, layers):
    """Single-sequence convenience wrapper: list of [d_in] -> list of [2h]."""
    if len(inputs) == 0:
        raise EmptyInputError("bilstm_sequence: empty sequence")
    x = reshape(stack(list(inputs), axis=0), (1, len(inputs), inputs[0].shape[-1]))
    out = bilstm(x, None, layers)
    return [out[0, i] for i in range(len(inputs))]


def bilstm_layers(params, prefix, n_layers):
    return [(LSTMParams.from_params(params, f"{prefix}.l{k}.fw"),
             LSTMParams.from_params(params, f"{prefix}.l{k}.bw")) for k in range(n_layers)]


def init_bilstm(rng, prefix, d_in, hidden, n_layers):
    params = {}
    for k in range(n_layers):
        width = d_in if k == 0 else 2 * hidden
        params.update(init_lstm(rng, f"{prefix}.l{k}.fw", width, hidden))
        params.update(init_lstm(rng, f"{prefix}.l{k}.bw", width, hidden))
    return params
