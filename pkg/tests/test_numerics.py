import math

import numpy as np
import pytest

from dualtte.numerics import (
    AdamState,
    CheckpointError,
    NonFiniteGradient,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    add,
    concat,
    conv1d_prepad,
    gather_rows,
    glorot_uniform,
    grad,
    load_checkpoint,
    make_rng,
    matmul,
    mul,
    relu,
    save_checkpoint,
    sigmoid,
    softplus,
    tanh,
    transpose,
    tsum,
)
from dualtte.numerics.checkpoint import decode_checkpoint, encode_checkpoint

from oracles import central_diff, rel_err


def _param(rng, *shape):
    return Tensor(rng.uniform(-2, 2, shape), requires_grad=True)


def _check(f, params, tol=1e-4):
    with Tape():
        loss = f()
        g = grad(loss, params)
    num = central_diff(lambda: f().item(), {k: v.data for k, v in params.items()})
    for k in params:
        # differences carry absolute noise of order eps*|f|/h, so tiny entries get a scaled floor
        floor = 1e-5 * max(1.0, float(np.abs(num[k]).max()))
        assert rel_err(g[k], num[k], floor=floor) < tol, k


def test_identity_products():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    assert np.array_equal(matmul(np.eye(3), x).data, x.data)
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, np.eye(2)).data, [[1, 2], [3, 4]])
    assert np.array_equal(tanh(np.zeros((2, 3))).data, np.zeros((2, 3)))


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        add(np.ones((2, 3)), np.ones(4))


def test_scalar_gradients():
    x = Tensor(3.0, requires_grad=True)
    with Tape():
        g = grad(mul(x, x), {"x": x})
    assert g["x"] == pytest.approx(6.0)
    x = Tensor(0.0, requires_grad=True)
    with Tape():
        g = grad(tanh(x), {"x": x})
    assert g["x"] == pytest.approx(1.0)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = mul(x, 2.0)
        with pytest.raises(ShapeError):
            grad(y, {"x": x})


def test_unused_parameter_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape():
        g = grad(tsum(mul(x, x)), {"x": x, "y": y})
    assert np.array_equal(g["y"], np.zeros((2, 2)))


@pytest.mark.parametrize("seed", range(20))
def test_random_composition_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    A = _param(rng, 3, 4)
    W1 = _param(rng, 4, 5)
    W2 = _param(rng, 5, 2)
    b = _param(rng, 5)
    idx = rng.integers(0, 3, 4)

    def f():
        h = tanh(add(matmul(A, W1), b))
        h = mul(sigmoid(h), relu(h))
        h = concat([h, softplus(transpose(matmul(W2, np.ones((2, 3)))))], axis=-1)
        return tsum(mul(gather_rows(h, idx), gather_rows(h, idx[::-1])))

    _check(f, {"A": A, "W1": W1, "W2": W2, "b": b})


@pytest.mark.parametrize("seed", range(4))
def test_batched_matmul_layouts(seed):
    rng = np.random.default_rng(seed)
    Z = _param(rng, 2, 3, 4, 3)
    L = _param(rng, 4, 4)
    W = _param(rng, 3, 2)
    M = _param(rng, 2, 3, 3, 2)

    def f():
        return tsum(tanh(matmul(matmul(L, matmul(Z, W)), transpose(W)) * 0.3) + tsum(matmul(Z, M)) * 0.01)

    _check(f, {"Z": Z, "L": L, "W": W, "M": M})


def test_conv_examples():
    x = Tensor(np.array([[1.0], [2.0], [3.0]]))
    assert np.allclose(conv1d_prepad(x, np.ones((2, 1, 1)), np.zeros(1)).data.ravel(), [1, 3, 5])
    assert np.array_equal(conv1d_prepad(x, np.ones((1, 1, 1)), np.zeros(1)).data, x.data)
    assert np.array_equal(conv1d_prepad(x, np.zeros((3, 1, 2)), np.zeros(2)).data, np.zeros((3, 2)))
    # kernel wider than the sequence is fine
    assert conv1d_prepad(x, np.ones((5, 1, 1)), np.zeros(1)).shape == (3, 1)
    with pytest.raises(ShapeError):
        conv1d_prepad(x, np.ones((0, 1, 1)), np.zeros(1))


@pytest.mark.parametrize("time_axis,shape", [(-2, (6, 3)), (-3, (2, 6, 4, 3)), (0, (6, 2, 3))])
def test_conv_gradients_and_causality(time_axis, shape, rng):
    x = _param(rng, *shape)
    K = _param(rng, 3, 3, 2)
    b = _param(rng, 2)
    _check(lambda: tsum(tanh(conv1d_prepad(x, K, b, time_axis=time_axis))), {"x": x, "K": K, "b": b})
    base = conv1d_prepad(x, K, b, time_axis=time_axis).data
    x2 = x.data.copy()
    sl = [slice(None)] * x2.ndim
    sl[time_axis] = slice(4, None)
    x2[tuple(sl)] += 10.0
    moved = conv1d_prepad(Tensor(x2), K, b, time_axis=time_axis).data
    keep = [slice(None)] * x2.ndim
    keep[time_axis] = slice(0, 4)
    assert np.array_equal(base[tuple(keep)], moved[tuple(keep)])
    assert not np.array_equal(base, moved)


def test_replay_is_bitwise_identical(rng):
    W = _param(rng, 4, 4)
    x = rng.normal(size=(5, 4))
    with Tape() as tape:
        loss = tsum(tanh(matmul(matmul(x, W), W)))
        g1 = tape.backward(loss, [W])[0]
        g2 = tape.backward(loss, [W])[0]
    assert np.array_equal(g1, g2)


def test_adam_hand_step():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    st = adam_step(p, {"w": np.array([2.0])}, AdamState(lr=0.001))
    # m_hat = 2, v_hat = 4 -> step = 0.001 * 2 / (2 + 1e-8)
    assert p["w"].data[0] == pytest.approx(1.0 - 0.001 * 2 / (2 + 1e-8), abs=1e-15)
    assert st.step == 1


def test_adam_fixed_points(rng):
    p = {"a": Tensor(rng.normal(size=(3, 2)), requires_grad=True)}
    before = p["a"].data.copy()
    st = AdamState()
    adam_step(p, {"a": np.ones((3, 2))}, st)
    moved = p["a"].data.copy()
    m_prev = st.m["a"].copy()
    adam_step(p, {"a": np.zeros((3, 2))}, st)
    assert np.all(np.abs(st.m["a"]) < np.abs(m_prev))
    assert st.step == 2
    assert not np.array_equal(before, moved)
    q = {"a": Tensor(before.copy(), requires_grad=True)}
    for _ in range(3):
        adam_step(q, {"a": np.zeros((3, 2))}, AdamState())
    assert np.array_equal(q["a"].data, before)
    z = {"a": Tensor(before.copy(), requires_grad=True)}
    adam_step(z, {"a": rng.normal(size=(3, 2))}, AdamState(lr=0.0))
    assert np.array_equal(z["a"].data, before)


def test_adam_rejects_non_finite_and_leaves_state():
    p = {"ok": Tensor(np.ones(2), requires_grad=True), "bad": Tensor(np.ones(2), requires_grad=True)}
    st = AdamState()
    with pytest.raises(NonFiniteGradient, match="bad"):
        adam_step(p, {"ok": np.ones(2), "bad": np.array([1.0, math.nan])}, st)
    assert st.step == 0 and not st.m
    assert np.array_equal(p["ok"].data, np.ones(2))


def test_glorot_bounds_and_determinism():
    a = glorot_uniform(make_rng(3), (40, 60), 40, 60)
    b = glorot_uniform(make_rng(3), (40, 60), 40, 60)
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= math.sqrt(6 / 100)


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"w": rng.normal(size=(3, 2)), "b": np.zeros(4), "s": np.array(2.5)}
    cfg = {"a": 1, "nested": {"x": [1, 2]}}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, arrays)
    cfg2, arr2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert set(arr2) == set(arrays)
    for k in arrays:
        assert np.array_equal(arr2[k], arrays[k]) and arr2[k].shape == arrays[k].shape
    assert path.read_bytes() == encode_checkpoint(cfg, arrays)
    assert decode_checkpoint(path.read_bytes())[0] == 1
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"garbage!" + path.read_bytes()[8:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(path.read_bytes()[:-3])


def test_closed_tape_refuses_backward():
    W = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(matmul(W, W))
    assert len(tape) == 0
    with pytest.raises(RuntimeError, match="closed"):
        grad(loss, {"W": W})
