import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialoguecrn.cognition import (ReasoningState, cognition_loop, fuse, init_cognition, initial_state,
                                   reason_step, retrieve)
from dialoguecrn.errors import DimensionError, EmptySupportError
from dialoguecrn.gradcheck import check_params
from dialoguecrn.recurrent import LSTMParams
from dialoguecrn.tensor import Tensor, concat

D = 3  # d_u; contexts and memories have extent 2D, queries 4D


def _params(level="s", seed=0, d=D):
    return init_cognition(np.random.default_rng(seed), d, level)


def _lstm(params, level="s"):
    return LSTMParams.from_params(params, f"cognition.{level}.lstm")


def _state(rng, d=D):
    z = Tensor(np.zeros(2 * d))
    return ReasoningState(0, Tensor(rng.normal(size=4 * d)), z, z)


# reason_step --------------------------------------------------------------------

def test_reason_step_zero_params(rng):
    params = _params()
    for p in params.values():
        p.data[:] = 0.0
    q_tilde, (h, c) = reason_step(_state(rng), _lstm(params))
    assert np.array_equal(q_tilde.data, np.zeros(2 * D))
    assert np.array_equal(h.data, np.zeros(2 * D)) and np.array_equal(c.data, np.zeros(2 * D))


def test_working_memory_carries_state(rng):
    params, state = _params(), _state(rng)
    q1, (h, c) = reason_step(state, _lstm(params))
    q2, _ = reason_step(ReasoningState(1, state.q, h, c), _lstm(params))
    q_reset, _ = reason_step(state, _lstm(params))
    assert np.array_equal(q1.data, q_reset.data)
    assert not np.allclose(q1.data, q2.data)


def test_reason_step_extent_check(rng):
    z = Tensor(np.zeros(2 * D))
    with pytest.raises(DimensionError):
        reason_step(ReasoningState(0, Tensor(np.ones(3 * D)), z, z), _lstm(_params()))


def test_two_chained_steps_gradient(rng):
    params = _params()
    q = Tensor(rng.normal(size=4 * D), requires_grad=True)
    w = Tensor(rng.normal(size=2 * D))

    def loss():
        z = Tensor(np.zeros(2 * D))
        lstm = _lstm(params)
        q1, (h, c) = reason_step(ReasoningState(0, q, z, z), lstm)
        q2, _ = reason_step(ReasoningState(1, q, h, c), lstm)
        return ((q1 + q2) * w).sum()

    report = check_params(loss, {**params, "q": q})
    assert report.max_rel_err < 1e-3, report.worst()


# retrieve -----------------------------------------------------------------------

def test_retrieve_single_row(rng):
    g = rng.normal(size=(1, 2 * D))
    r, alpha = retrieve(Tensor(rng.normal(size=2 * D)), Tensor(g))
    assert np.array_equal(alpha.data, [1.0])
    np.testing.assert_allclose(r.data, g[0], atol=1e-15)


def test_retrieve_identical_rows(rng):
    v = rng.normal(size=2 * D)
    r, _ = retrieve(Tensor(rng.normal(size=2 * D)), Tensor(np.tile(v, (5, 1))))
    np.testing.assert_allclose(r.data, v, atol=1e-14)


def test_retrieve_zero_query_is_uniform_over_support(rng):
    G = rng.normal(size=(4, 2 * D))
    mask = np.array([True, False, True, True])
    r, alpha = retrieve(Tensor(np.zeros(2 * D)), Tensor(G), mask)
    np.testing.assert_allclose(alpha.data, [1 / 3, 0, 1 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_allclose(r.data, G[mask].mean(axis=0), atol=1e-14)


def test_retrieve_all_masked(rng):
    with pytest.raises(EmptySupportError):
        retrieve(Tensor(np.ones(2 * D)), Tensor(np.ones((2, 2 * D))), np.array([False, False]))


# cognition_loop -------------------------------------------------------------------

def test_zero_turns_returns_initial_query(rng):
    params = _params()
    c = rng.normal(size=(4, 2 * D))
    q = cognition_loop(Tensor(c), Tensor(rng.normal(size=(4, 2 * D))), 0, params, "cognition.s")
    assert np.array_equal(q.data, c @ params["cognition.s.w_q"].data + params["cognition.s.b_q"].data)


@pytest.mark.parametrize("turns", [0, 1, 3])
def test_output_extent_full_size(turns, rng):
    params = _params(d=100)
    q = cognition_loop(Tensor(rng.normal(size=200)), Tensor(rng.normal(size=(6, 200))), turns,
                       params, "cognition.s")
    assert q.shape == (400,)


def test_two_turns_equal_manual_unrolling(rng):
    params = _params()
    c, G = Tensor(rng.normal(size=(5, 2 * D))), Tensor(rng.normal(size=(5, 2 * D)))
    looped = cognition_loop(c, G, 2, params, "cognition.s").data
    state = initial_state(c, params, "cognition.s")
    lstm = _lstm(params)
    for t in (1, 2):
        q_tilde, (h, cell) = reason_step(state, lstm)
        r, _ = retrieve(q_tilde, G)
        state = ReasoningState(t, concat([q_tilde, r], axis=-1), h, cell)
    assert np.array_equal(looped, state.q.data)


@settings(max_examples=15)
@given(seed=st.integers(0, 10_000), turns=st.integers(1, 4), n=st.integers(1, 6))
def test_attention_is_a_distribution_and_traces_nest(seed, turns, n):
    rng = np.random.default_rng(seed)
    params = _params(seed=seed)
    mask = np.ones((2, n), dtype=bool)
    mask[1, n // 2 + 1:] = False
    c, G = Tensor(rng.normal(size=(2, n, 2 * D))), Tensor(rng.normal(size=(2, n, 2 * D)))
    q_T, trace_T = cognition_loop(c, G, turns, params, "cognition.s", mask, trace=True)
    q_T1, trace_T1 = cognition_loop(c, G, turns + 1, params, "cognition.s", mask, trace=True)
    assert len(trace_T) == turns and len(trace_T1) == turns + 1
    for alpha in trace_T1:
        assert np.all(alpha >= 0)
        assert np.all(alpha[~np.broadcast_to(mask[:, None, :], alpha.shape)] == 0)
        np.testing.assert_allclose(alpha.sum(-1), 1.0, atol=1e-6)
    for a, b in zip(trace_T, trace_T1):
        assert np.array_equal(a, b)
    assert not np.array_equal(q_T.data, q_T1.data)


def test_instances_share_no_parameters(rng):
    params = {**_params("s", 0), **_params("v", 1)}
    c, G = Tensor(rng.normal(size=(3, 2 * D))), Tensor(rng.normal(size=(3, 2 * D)))
    before = cognition_loop(c, G, 2, params, "cognition.s").data
    for k, p in params.items():
        if k.startswith("cognition.v"):
            p.data = p.data + 1.0
    assert np.array_equal(cognition_loop(c, G, 2, params, "cognition.s").data, before)


def test_negative_turns():
    with pytest.raises(ValueError):
        cognition_loop(Tensor(np.ones(2 * D)), Tensor(np.ones((2, 2 * D))), -1, _params(), "cognition.s")


# fuse -----------------------------------------------------------------------------

def test_fuse_split_recovers_parts(rng):
    a, b = rng.normal(size=400), rng.normal(size=400)
    o = fuse(Tensor(a), Tensor(b)).data
    assert o.shape == (800,)
    assert np.array_equal(o[:400], a) and np.array_equal(o[400:], b)


def test_fuse_zero_first_half(rng):
    o = fuse(Tensor(np.zeros(8)), Tensor(rng.normal(size=8))).data
    assert np.array_equal(o[:8], np.zeros(8))


def test_fuse_mismatch():
    with pytest.raises(DimensionError):
        fuse(Tensor(np.ones(8)), Tensor(np.ones(6)))
