import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dialoguecrn import tensor as T
from dialoguecrn.errors import DimensionError, EmptyInputError, EmptySupportError, ProbeError, TapeError
from dialoguecrn.gradcheck import check_params, grad_check, relative_error
from dialoguecrn.recurrent import LSTMParams, bilstm, bilstm_sequence, init_lstm, lstm_cell
from dialoguecrn.tensor import Tape, Tensor, backward, no_grad

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)
seeds = st.integers(0, 2**32 - 1)


def _grad(f, x0):
    x = Tensor(np.array(x0, dtype=float), requires_grad=True)
    with Tape():
        backward(f(x))
    return x.grad


# matmul ---------------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 1.0], [4.0, 1.0]]))
    np.testing.assert_array_equal(out.data, [[3, 1], [4, 1]])


def test_matmul_zero_annihilates(rng):
    out = T.matmul(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(4, 5))))
    np.testing.assert_array_equal(out.data, np.zeros((3, 5)))


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_grad_matches_finite_differences(rng):
    B = Tensor(rng.normal(size=(3, 2)))
    report = grad_check(lambda a: T.matmul(a, B).sum(), rng.normal(size=(4, 3)), eps=1e-3)
    assert report.max_rel_err < 1e-4


# elementwise ---------------------------------------------------------------

def test_tanh_sigmoid_relu_values():
    assert T.tanh(Tensor(0.0)).item() == 0.0
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_elementwise_dispatch_and_mismatch():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    np.testing.assert_array_equal(T.elementwise("mul", a, b).data, [3.0, 8.0])
    np.testing.assert_array_equal(T.elementwise("add", a, b).data, [4.0, 6.0])
    with pytest.raises(DimensionError):
        T.elementwise("add", Tensor(np.ones(3)), Tensor(np.ones(2)))


def test_tanh_grad_at_spec_point():
    report = grad_check(lambda x: T.tanh(x).sum(), [0.3, -0.7])
    assert report.max_rel_err < 1e-4


def test_broadcast_grads_reduce_to_operand_shape(rng):
    bias = Tensor(rng.normal(size=3), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 3)))
    with Tape():
        backward((x + bias).sum())
    np.testing.assert_allclose(bias.grad, np.full(3, 4.0))


UNARY = {
    "tanh": T.tanh, "sigmoid": T.sigmoid, "exp": T.exp,
    "relu": T.relu, "abs": T.tabs, "neg": T.neg,
    "log": lambda x: T.log(x * x + 1.0),
    "softmax": lambda x: T.softmax(x) * Tensor(np.arange(1.0, x.shape[-1] + 1)),
    "log_softmax": lambda x: T.log_softmax(x) * Tensor(np.arange(1.0, x.shape[-1] + 1)),
    "mean": lambda x: T.mean(x * x, axis=0),
    "reshape": lambda x: T.reshape(x, (-1,)) * Tensor(np.arange(x.size, dtype=float)),
    "transpose": lambda x: T.transpose(x) @ Tensor(np.ones((x.shape[0], 2))),
    "getitem": lambda x: x[1:, ::2] * 3.0,
    "take": lambda x: T.take(x, np.array([0, 2, 2, 1])) * 2.0,
    "masked_max": lambda x: T.masked_max(x, np.array([True, False, True, True]), axis=-1),
    "masked_softmax": lambda x: T.masked_softmax(x, np.array([True, True, False, True])) * Tensor([1.0, 2.0, 3.0, 4.0]),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=10)
@given(x0=arrays(np.float64, (3, 4), elements=finite))
def test_unary_ops_pass_finite_differences(name, x0):
    if name in ("relu", "abs"):
        x0 = np.where(np.abs(x0) < 1e-3, 0.5, x0)  # nudge off the kink
    if name == "masked_max":
        x0 = x0 + np.arange(4) * 1e-2  # separate near-ties
    f = UNARY[name]
    report = grad_check(lambda x: (f(x) * f(x)).sum(), x0)
    assert report.max_rel_err < 1e-4, report.worst()


BINARY = {
    "add": T.add, "sub": T.sub, "mul": T.mul,
    "div": lambda a, b: T.div(a, b * b + 1.0),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "concat": lambda a, b: T.concat([a, b], axis=-1) * Tensor(np.arange(8.0)),
    "stack": lambda a, b: T.stack([a, b], axis=0) * Tensor(np.arange(12.0).reshape(2, 3, 2)[..., :1]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=10)
@given(a0=arrays(np.float64, (3, 4), elements=finite), b0=arrays(np.float64, (3, 4), elements=finite))
def test_binary_ops_pass_finite_differences(name, a0, b0):
    f = BINARY[name]
    b = Tensor(b0)
    ra = grad_check(lambda aa: (f(aa, b) * f(aa, b)).sum(), a0)
    a = Tensor(a0)
    rb = grad_check(lambda bb: (f(a, bb) * f(a, bb)).sum(), b0)
    assert ra.max_rel_err < 1e-4 and rb.max_rel_err < 1e-4


# masked softmax ---------------------------------------------------------------

def test_masked_softmax_uniform():
    np.testing.assert_allclose(T.masked_softmax(Tensor(np.zeros(4))).data, np.full(4, 0.25))


def test_masked_softmax_masking_is_exact():
    out = T.masked_softmax(Tensor([5.0, 5.0, 9.0]), np.array([True, True, False])).data
    assert out[2] == 0.0
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-15)


def test_masked_softmax_matches_direct_oracle():
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(T.masked_softmax(Tensor([1.0, 2.0, 3.0])).data, e / e.sum(), atol=1e-9)


def test_masked_softmax_all_masked_raises():
    with pytest.raises(EmptySupportError):
        T.masked_softmax(Tensor([1.0, 2.0]), np.array([False, False]))


@given(x=arrays(np.float64, (5, 6), elements=st.floats(-50, 50)),
       m=arrays(np.bool_, (5, 6)))
def test_masked_softmax_is_a_distribution_on_the_support(x, m):
    m[:, 0] = True
    y = T.masked_softmax(Tensor(x), m).data
    assert np.all(y[~m] == 0.0)
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_masked_softmax_composite_with_dot(rng):
    G = Tensor(rng.normal(size=(5, 3)))
    mask = np.array([True, True, False, True, True])
    w = Tensor(rng.normal(size=5))
    f = lambda q: (T.masked_softmax(G @ q, mask) * w).sum()
    assert grad_check(f, rng.normal(size=3)).max_rel_err < 1e-4


# LSTM -------------------------------------------------------------------------

def _zero_lstm(d_in, h):
    return LSTMParams(Tensor(np.zeros((d_in, 4 * h))), Tensor(np.zeros((h, 4 * h))), Tensor(np.zeros(4 * h)))


def test_lstm_zero_params_zero_state(rng):
    h, c = lstm_cell(Tensor(rng.normal(size=3)), Tensor(np.zeros(2)), Tensor(np.zeros(2)), _zero_lstm(3, 2))
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


def test_lstm_zero_prev_cell_is_input_gate_times_candidate(rng):
    params = init_lstm(rng, "l", 3, 2)
    p = LSTMParams.from_params(params, "l")
    x = rng.normal(size=3)
    _, c = lstm_cell(Tensor(x), Tensor(np.zeros(2)), Tensor(np.zeros(2)), p)
    pre = x @ p.w_ih.data + p.b.data
    i = 1 / (1 + np.exp(-pre[:2]))
    g = np.tanh(pre[6:])
    np.testing.assert_allclose(c.data, i * g, atol=1e-14)


def test_lstm_forget_bias_is_one(rng):
    p = LSTMParams.from_params(init_lstm(rng, "l", 3, 2), "l")
    np.testing.assert_array_equal(p.b.data, [0, 0, 1, 1, 0, 0, 0, 0])


def test_lstm_shape_mismatch():
    with pytest.raises(DimensionError):
        lstm_cell(Tensor(np.ones(4)), Tensor(np.zeros(2)), Tensor(np.zeros(2)), _zero_lstm(3, 2))


def test_lstm_cell_gradient_three_units(rng):
    params = init_lstm(rng, "l", 4, 3)
    x = Tensor(rng.normal(size=4), requires_grad=True)
    h0 = Tensor(rng.normal(size=3), requires_grad=True)
    c0 = Tensor(rng.normal(size=3), requires_grad=True)
    w = rng.normal(size=3)

    def loss():
        h, c = lstm_cell(x, h0, c0, LSTMParams.from_params(params, "l"))
        return (h * Tensor(w)).sum() + (c * c).sum()

    report = check_params(loss, {**params, "x": x, "h0": h0, "c0": c0})
    assert report.max_rel_err < 1e-4, report.worst()


def _bi(rng, d_in, h, tied=False):
    fw = LSTMParams.from_params(init_lstm(rng, "f", d_in, h), "f")
    bw = fw if tied else LSTMParams.from_params(init_lstm(rng, "b", d_in, h), "b")
    return [(fw, bw)]


def test_bilstm_length_one(rng):
    layers = _bi(rng, 3, 2)
    x = rng.normal(size=3)
    out = bilstm_sequence([Tensor(x)], layers)
    z = Tensor(np.zeros(2))
    hf, _ = lstm_cell(Tensor(x), z, z, layers[0][0])
    hb, _ = lstm_cell(Tensor(x), z, z, layers[0][1])
    np.testing.assert_allclose(out[0].data, np.concatenate([hf.data, hb.data]), atol=1e-14)


def test_bilstm_reversal_swaps_halves_with_tied_params(rng):
    layers = _bi(rng, 3, 2, tied=True)
    xs = [Tensor(v) for v in rng.normal(size=(5, 3))]
    fwd = bilstm_sequence(xs, layers)
    rev = bilstm_sequence(xs[::-1], layers)
    for i in range(5):
        a, b = fwd[4 - i].data, rev[i].data
        np.testing.assert_allclose(b, np.concatenate([a[2:], a[:2]]), atol=1e-12)


def test_bilstm_output_extent_and_empty(rng):
    layers = _bi(rng, 3, 4)
    out = bilstm_sequence([Tensor(v) for v in rng.normal(size=(6, 3))], layers)
    assert all(o.shape == (8,) for o in out)
    with pytest.raises(EmptyInputError):
        bilstm_sequence([], layers)


def test_bilstm_masked_padding_matches_unpadded(rng):
    layers = _bi(rng, 3, 2) + [(LSTMParams.from_params(init_lstm(rng, "f2", 4, 2), "f2"),
                                 LSTMParams.from_params(init_lstm(rng, "b2", 4, 2), "b2"))]
    x = rng.normal(size=(2, 6, 3))
    mask = np.array([[True] * 6, [True] * 4 + [False] * 2])
    batched = bilstm(Tensor(x), mask, layers).data
    alone = bilstm(Tensor(x[1:, :4]), None, layers).data
    np.testing.assert_allclose(batched[1, :4], alone[0], atol=1e-12)


# backward ---------------------------------------------------------------------

def test_backward_sum_gives_ones():
    np.testing.assert_array_equal(_grad(lambda x: x.sum(), np.arange(4.0)), np.ones(4))


def test_backward_zero_times_x_gives_zero():
    np.testing.assert_array_equal(_grad(lambda x: (x * 0.0).sum(), np.arange(4.0)), np.zeros(4))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = x * 2.0
        with pytest.raises(TapeError):
            backward(y)


def test_backward_twice_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = (x * x).sum()
        backward(y)
        with pytest.raises(TapeError):
            backward(y)


def test_leaf_grads_accumulate_across_fresh_forwards():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape():
            backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_tape_replays_in_reverse_order():
    x = Tensor(np.array([0.5]), requires_grad=True)
    with Tape() as tape:
        a = T.tanh(x)
        b = a * a
        c = b.sum()
    assert [n[0] for n in tape.nodes] == [a, b, c]
    backward(c)
    assert x.grad is not None and a.grad is not None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            (x * 2.0).sum()
    assert len(tape) == 0


@given(seed=seeds)
@settings(max_examples=10)
def test_forward_is_bitwise_deterministic(seed):
    rng = np.random.default_rng(seed)
    w, x = rng.normal(size=(4, 3)), rng.normal(size=(5, 4))
    f = lambda: T.log_softmax(T.tanh(Tensor(x) @ Tensor(w))).data
    assert np.array_equal(f(), f())


@given(x=arrays(np.float64, st.integers(1, 6), elements=finite))
def test_forward_stays_finite(x):
    for op in (T.tanh, T.sigmoid, T.relu, T.softmax, T.log_softmax):
        assert np.all(np.isfinite(op(Tensor(x)).data))


# grad_check itself --------------------------------------------------------------

def test_grad_check_quadratic_is_exact():
    r = grad_check(lambda x: (x * x).sum(), [1.0], eps=1e-3)
    assert abs(r.analytic[0] - 2.0) < 1e-6 and abs(r.numeric[0] - 2.0) < 1e-6


def test_grad_check_flags_a_corrupted_adjoint():
    def bad_square(x):
        return T.record_op(x.data ** 2, (x,), lambda g: (3.0 * x.data * g,))
    assert not grad_check(lambda x: bad_square(x).sum(), [0.7, -1.2]).passed


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_non_finite_probe():
    with pytest.raises(ProbeError):
        grad_check(lambda x: T.log(x).sum(), [0.0], eps=1e-3)


def test_relative_error_floor():
    assert relative_error(0.0, 1e-12)[()] < 1e-3


# dtype and dump -----------------------------------------------------------------

def test_float32_mode_round_trip():
    T.set_default_dtype(np.float32)
    try:
        assert Tensor([1.0]).data.dtype == np.float32
        r = grad_check(lambda x: T.tanh(x).sum(), [0.3, -0.7], eps=1e-2, tolerance=1e-2)
        assert r.passed
    finally:
        T.set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64


def test_dump_round_trip(tmp_path, rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    T.dump_tensor(x, tmp_path / "x.bin")
    assert np.array_equal(T.load_tensor(tmp_path / "x.bin").data, x.data)
    raw = (tmp_path / "x.bin").read_bytes()
    assert int.from_bytes(raw[:8], "little") == 3
