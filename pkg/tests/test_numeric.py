import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docgcn.numeric import (
    Adam,
    AdamState,
    CheckpointError,
    NumericError,
    Parameter,
    Tape,
    TapeError,
    Tensor,
    adam_step,
    backward,
    clip_grad_norm,
    gradient_check,
    gradient_check_report,
    load_checkpoint,
    ops,
    save_checkpoint,
    zero_gradients,
)


def grad_of(fn, *values):
    params = [Parameter(np.asarray(v, dtype=float), f"p{k}") for k, v in enumerate(values)]
    with Tape() as tape:
        out = fn(*params)
    backward(tape, out)
    return [p.grad for p in params]


# ---------------------------------------------------------------- leaky relu


def test_leaky_relu_branches():
    assert ops.leaky_relu(Tensor(2.0), 0.01).item() == 2.0
    assert ops.leaky_relu(Tensor(-1.0), 0.01).item() == pytest.approx(-0.01, abs=0)
    (g,) = grad_of(lambda x: ops.leaky_relu(x, 0.01), -3.0)
    assert g == 0.01


def test_leaky_relu_rejects_nonfinite_and_bad_slope():
    with pytest.raises(NumericError):
        ops.leaky_relu(Tensor([1.0, np.nan]))
    with pytest.raises(ValueError):
        ops.leaky_relu(Tensor(1.0), 1.5)


# ------------------------------------------------------------ masked softmax


def test_masked_softmax_examples():
    np.testing.assert_allclose(ops.masked_softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    assert ops.masked_softmax(Tensor([5.0])).data.tolist() == [1.0]
    np.testing.assert_allclose(ops.masked_softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3])


def test_masked_softmax_masked_positions_are_exact_zero():
    y = ops.masked_softmax(Tensor([3.0, 1.0, -2.0]), np.array([True, False, True])).data
    assert y[1] == 0.0
    assert y.sum() == pytest.approx(1.0, abs=1e-15)


def test_masked_softmax_all_masked_is_error():
    with pytest.raises(ValueError):
        ops.masked_softmax(Tensor([1.0, 2.0]), np.array([False, False]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30))
def test_softmax_sums_to_one(values):
    y = ops.masked_softmax(Tensor(values)).data
    assert abs(y.sum() - 1.0) < 1e-12


# ------------------------------------------------------------------ backward


def test_backward_square_and_product():
    (g,) = grad_of(lambda x: ops.mul(x, x), 3.0)
    assert g == 6.0
    gx, gy = grad_of(lambda x, y: ops.mul(x, y), 2.0, 5.0)
    assert (gx, gy) == (5.0, 2.0)


def test_backward_errors():
    x = Parameter(1.0, "x")
    with Tape() as tape:
        y = ops.mul(x, x)
    backward(tape, y)
    with pytest.raises(TapeError):
        backward(tape, y)
    with pytest.raises(TapeError):
        with tape:
            pass
    with Tape() as tape:
        v = ops.mul(Parameter([1.0, 2.0], "v"), 2.0)
    with pytest.raises(TapeError):
        backward(tape, v)


def test_backward_accumulates_across_losses():
    x = Parameter(2.0, "x")
    for _ in range(2):
        with Tape() as tape:
            y = ops.mul(ops.mul(x, x), 1.5)
        backward(tape, y)
    assert x.grad == pytest.approx(2 * 3.0 * 2.0)
    zero_gradients([x])
    assert x.grad == 0.0


def test_overflow_is_an_error():
    with pytest.raises(NumericError):
        with Tape():
            ops.exp(Parameter([800.0], "x"))


def test_replay_visits_nodes_in_reverse():
    x = Parameter(1.0, "x")
    seen = []
    with Tape() as tape:
        a = ops.mul(x, 2.0)
        b = ops.mul(a, 3.0)
    wrapped = []
    for out, inputs, adj in tape.nodes:
        def spy(g, adj=adj, out=out):
            seen.append(out)
            return adj(g)
        wrapped.append((out, inputs, spy))
    tape.nodes[:] = wrapped
    backward(tape, b)
    assert seen == [b, a]


def _mlp(rng, d_in=4, hidden=5):
    w1 = Parameter(rng.normal(size=(d_in, hidden)), "w1")
    b1 = Parameter(rng.normal(size=hidden), "b1")
    w2 = Parameter(rng.normal(size=(hidden, 1)), "w2")
    x = rng.normal(size=(3, d_in))
    y = rng.normal(size=(3, 1))

    def loss():
        h = ops.tanh(ops.add(ops.matmul(x, w1), b1))
        err = ops.add(ops.matmul(h, w2), -y)
        return ops.sum_(ops.mul(err, err))

    return loss, [w1, b1, w2]


def test_mlp_gradient_matches_finite_differences():
    loss, params = _mlp(np.random.default_rng(0))
    assert gradient_check(loss, params, eps=1e-5) < 1e-6


def test_gradients_are_deterministic():
    grads = []
    for _ in range(2):
        loss, params = _mlp(np.random.default_rng(3))
        with Tape() as tape:
            out = loss()
        backward(tape, out)
        grads.append(np.concatenate([p.grad.ravel() for p in params]))
    assert np.array_equal(grads[0], grads[1])


# --------------------------------------------------- per-primitive adjoints

RNG = np.random.default_rng(11)


def _u(*shape):
    return RNG.uniform(-2, 2, size=shape)


PRIMITIVES = {
    "add_broadcast": ([(3, 4), (4,)], lambda a, b: ops.add(a, b)),
    "mul_broadcast": ([(3, 1), (3, 4)], lambda a, b: ops.mul(a, b)),
    "matmul_2d": ([(3, 4), (4, 2)], lambda a, b: ops.matmul(a, b)),
    "matmul_vec": ([(2, 3, 4), (4,)], lambda a, b: ops.matmul(a, b)),
    "matmul_batched": ([(3, 2, 4), (3, 4, 5)], lambda a, b: ops.matmul(a, b)),
    "matmul_3d_2d": ([(2, 3, 4), (4, 5)], lambda a, b: ops.matmul(a, b)),
    "concat": ([(2, 3), (2, 2)], lambda a, b: ops.concat([a, b], axis=1)),
    "slice": ([(4, 5)], lambda a: a[1:3, ::2]),
    "fancy_slice": ([(4, 3)], lambda a: a[np.array([0, 2, 2, 3]), np.array([1, 0, 0, 2])]),
    "reshape": ([(2, 6)], lambda a: ops.reshape(a, (3, 4))),
    "transpose": ([(2, 3, 4)], lambda a: ops.transpose(a, (2, 0, 1))),
    "tanh": ([(3, 4)], ops.tanh),
    "sigmoid": ([(3, 4)], ops.sigmoid),
    "exp": ([(3, 4)], ops.exp),
    "leaky_relu": ([(3, 4)], lambda a: ops.leaky_relu(a, 0.2)),
    "masked_softmax": ([(3, 4)], lambda a: ops.masked_softmax(a, np.array([True, False, True, True]))),
    "logsumexp": ([(3, 4)], lambda a: ops.logsumexp(a, axis=0)),
    "gather": ([(5, 3)], lambda a: ops.gather(a, np.array([[0, 4], [4, 2]]))),
    "sum_axis": ([(3, 4)], lambda a: ops.sum_(a, axis=1)),
    "mean": ([(3, 4)], lambda a: ops.mean(a)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_adjoint_matches_finite_differences(name):
    shapes, fn = PRIMITIVES[name]
    params = [Parameter(_u(*s), f"in{k}") for k, s in enumerate(shapes)]
    with Tape():
        probe = RNG.uniform(-1, 1, size=fn(*params).shape)

    def closure():
        return ops.sum_(ops.mul(fn(*params), probe))

    assert gradient_check(closure, params, eps=1e-5) < 1e-6


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_scan_adjoint(reverse):
    B, T, H = 3, 4, 2
    xw = Parameter(_u(B, T, 4 * H), "xw")
    wh = Parameter(_u(H, 4 * H) * 0.5, "wh")
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], dtype=float)
    probe = RNG.uniform(-1, 1, size=(B, T, H))

    def closure():
        return ops.sum_(ops.mul(ops.lstm_scan(xw, mask, wh, reverse=reverse), probe))

    assert gradient_check(closure, [xw, wh], eps=1e-5) < 1e-6


def test_lstm_scan_masked_steps_carry_state():
    H = 2
    xw = Tensor(_u(2, 3, 4 * H))
    wh = Tensor(_u(H, 4 * H))
    mask = np.array([[1, 1, 1], [1, 0, 0]], dtype=float)
    out = ops.lstm_scan(xw, mask, wh).data
    np.testing.assert_array_equal(out[1, 1], out[1, 0])
    np.testing.assert_array_equal(out[1, 2], out[1, 0])
    rev = ops.lstm_scan(xw, mask, wh, reverse=True).data
    np.testing.assert_array_equal(rev[1, 1:], 0.0)
    # the single real step equals an unpadded run
    alone = ops.lstm_scan(Tensor(xw.data[1:, :1]), np.ones((1, 1)), wh).data
    np.testing.assert_allclose(out[1, 0], alone[0, 0])


# ------------------------------------------------------------------- adam


def test_adam_first_step_has_magnitude_lr():
    p = Parameter([1.0, -2.0], "p")
    p.grad[...] = [3.0, -0.5]
    adam_step([p], AdamState(), lr=0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_adam_zero_gradient_keeps_parameter():
    p = Parameter([1.5], "p")
    adam_step([p], AdamState(), lr=0.1)
    assert p.data[0] == 1.5


def test_adam_two_steps_match_hand_computation():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = Parameter([0.0], "p")
    state = AdamState()
    x, m, v = 0.0, 0.0, 0.0
    for t in (1, 2):
        p.grad[...] = 1.0
        adam_step([p], state, lr)
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert p.data[0] == pytest.approx(x, abs=1e-15)
    assert state.t == 2
    assert p.grad[0] == 1.0  # untouched


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        adam_step([Parameter([0.0], "p")], AdamState(), lr=0.0)
    with pytest.raises(ValueError):
        Adam([], lr=-1.0)


def test_clip_grad_norm():
    a, b = Parameter([0.0, 0.0], "a"), Parameter([0.0], "b")
    a.grad[...] = [3.0, 4.0]
    b.grad[...] = [12.0]
    assert clip_grad_norm([a, b], 5.0) == pytest.approx(13.0)
    total = math.sqrt((a.grad**2).sum() + (b.grad**2).sum())
    assert total == pytest.approx(5.0)


# -------------------------------------------------------- gradient check


def test_gradient_check_linear_is_exact():
    x = Parameter([0.7, -1.3], "x")
    assert gradient_check(lambda: ops.sum_(ops.mul(x, 3.0)), [x]) < 1e-10


def test_gradient_check_frozen_parameter_reports_zero():
    x = Parameter([0.7], "x")
    frozen = Parameter([2.0], "frozen", frozen=True)
    report = gradient_check_report(lambda: ops.sum_(ops.mul(x, x)), [x, frozen])
    assert report["frozen"] == 0.0
    assert frozen.grad[0] == 0.0


def test_gradient_check_catches_sign_flip():
    loss, params = _mlp(np.random.default_rng(1))
    err = gradient_check(loss, params, grad_transform=lambda name, g: -g)
    assert err > 0.5


# ------------------------------------------------------------ checkpoint


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(5)
    params = [Parameter(rng.normal(size=(3, 2)), "a"), Parameter(rng.normal(size=4) * 1e-300, "b")]
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, {"mode": "gcn"}, params)
    payload = load_checkpoint(path)
    assert payload["config"] == {"mode": "gcn"}
    for p in params:
        assert np.array_equal(payload["parameters"][p.name], p.data)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, {}, [Parameter([1.0], "a")])
    text = path.read_text().replace('"format_version": 1', '"format_version": 99')
    path.write_text(text)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
