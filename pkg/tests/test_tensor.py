import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmmemnet.numcore import (
    RunningStats,
    Tensor,
    batchnorm_forward,
    gru_cell,
    matmul,
    no_grad,
    relu,
    sigmoid,
    softmax,
    stack,
    take_rows,
    tanh,
)
from conftest import finite_difference


def tape_grad(op, *arrays, project_seed=0):
    """Gradient of sum(op(xs) * R) for a fixed random projection R."""
    rng = np.random.default_rng(project_seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    r = rng.normal(size=out.shape)
    (out * r).sum().backward()
    return [t.grad for t in tensors], r


def check_op_grads(op, *arrays, tol=1e-6, project_seed=0):
    grads, r = tape_grad(op, *arrays, project_seed=project_seed)
    for i, arr in enumerate(arrays):
        work = arr.copy()

        def f():
            xs = list(arrays)
            xs[i] = work
            with no_grad():
                return float((op(*[Tensor(x) for x in xs]).numpy() * r).sum())

        fd = finite_difference(f, work)
        assert np.allclose(grads[i], fd, rtol=tol, atol=tol), f"operand {i} gradient mismatch"


# ---- softmax oracles ------------------------------------------------------------


def test_softmax_symmetry():
    out = softmax(Tensor([0.0, 0.0]), axis=-1).numpy()
    assert np.allclose(out, [0.5, 0.5], atol=1e-15)


def test_softmax_hand_value():
    # e^{ln 2} = 2 against e^0 = 1, so probabilities are 2/3 and 1/3.
    out = softmax(Tensor([math.log(2.0), 0.0]), axis=-1).numpy()
    assert np.allclose(out, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)


@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
@settings(max_examples=50, deadline=None)
def test_softmax_constant_rows(x):
    out = softmax(Tensor([x, x, x]), axis=-1).numpy()
    assert np.allclose(out,alt := np.full(3, 1.0 / 3.0), atol=1e-12), (out, alt)


@given(st.lists(st.floats(min_value=-700, max_value=700, allow_nan=False), min_size=2, max_size=8),
       st.floats(min_value=-100, max_value=100, allow_nan=False))
@settings(max_examples=100, deadline=None)
def test_softmax_rowsum_and_shift_invariance(values, shift):
    x = np.array(values)
    a = softmax(Tensor(x), axis=-1).numpy()
    b = softmax(Tensor(x + shift), axis=-1).numpy()
    assert abs(a.sum() - 1.0) < 1e-12
    assert np.all(a >= 0)
    assert np.allclose(a, b, atol=1e-12)


def test_softmax_rejects_nan():
    with pytest.raises(FloatingPointError):
        softmax(Tensor._result(np.array([np.nan, 0.0]), (), None, "x"), axis=-1)
    with pytest.raises(FloatingPointError):
        Tensor([np.nan, 0.0])


# ---- simple op examples -----------------------------------------------------------


def test_relu_example():
    assert np.array_equal(relu(Tensor([-1.0, 0.0, 2.0])).numpy(), [0.0, 0.0, 2.0])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = (Tensor(np.eye(3)) @ Tensor(a)).numpy()
    assert np.array_equal(out, a)


def test_matmul_dim_mismatch():
    with pytest.raises(ValueError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_take_rows_out_of_range():
    with pytest.raises(ValueError):
        take_rows(Tensor(np.zeros((4, 2))), np.array([0, 4]))


# ---- gradient checks per op ---------------------------------------------------------


RNG = np.random.default_rng(7)


def test_grad_add_broadcast():
    check_op_grads(lambda a, b: a + b, RNG.normal(size=(4, 3, 5)), RNG.normal(size=(1, 5)))


def test_grad_mul_broadcast():
    check_op_grads(lambda a, b: a * b, RNG.normal(size=(4, 5)), RNG.normal(size=(5,)))


def test_grad_matmul_batched():
    check_op_grads(lambda a, b: a @ b, RNG.normal(size=(3, 4, 5)), RNG.normal(size=(3, 5, 2)))
    check_op_grads(lambda a, b: a @ b, RNG.normal(size=(6, 4)), RNG.normal(size=(4, 2)))
    check_op_grads(lambda a, b: a @ b, RNG.normal(size=(3, 4, 5)), RNG.normal(size=(5, 2)))


def test_grad_activations():
    x = RNG.normal(size=(4, 6))
    check_op_grads(sigmoid, x)
    check_op_grads(tanh, x)
    check_op_grads(lambda a: softmax(a, axis=-1), x)
    check_op_grads(relu, x + np.sign(x) * 0.05)  # keep away from the kink
    check_op_grads(lambda a: abs(a), x + np.sign(x) * 0.05)
    check_op_grads(lambda a: a ** 2.0, x)
    check_op_grads(lambda a: (a * a + 0.5) ** -0.5, x)


def test_grad_reductions_and_shapes():
    x = RNG.normal(size=(3, 4, 5))
    check_op_grads(lambda a: a.sum(axis=1), x)
    check_op_grads(lambda a: a.mean(axis=(0, 1)), x)
    check_op_grads(lambda a: a.reshape(12, 5), x)
    check_op_grads(lambda a: a.swapaxes(-1, -2), x)


def test_grad_take_rows_accumulates():
    table = RNG.normal(size=(5, 3))
    idx = np.array([[0, 1], [1, 4]])
    check_op_grads(lambda a: take_rows(a, idx), table)


def test_grad_stack():
    a, b = RNG.normal(size=(2, 3)), RNG.normal(size=(2, 3))
    check_op_grads(lambda x, y: stack([x, y], axis=1), a, b)


# ---- GRU cell ------------------------------------------------------------------------


def _gru_params(d_in, d_h, rng, zeros=False):
    def make(shape):
        return Tensor(np.zeros(shape) if zeros else rng.normal(0, 0.5, size=shape), requires_grad=True)

    return {
        "w_xr": make((d_in, d_h)), "w_hr": make((d_h, d_h)), "b_r": make((1, d_h)),
        "w_xz": make((d_in, d_h)), "w_hz": make((d_h, d_h)), "b_z": make((1, d_h)),
        "w_xn": make((d_in, d_h)), "w_hn": make((d_h, d_h)), "b_n": make((1, d_h)),
    }


def test_gru_zero_everything_gives_zero():
    rng = np.random.default_rng(0)
    p = _gru_params(2, 3, rng, zeros=True)
    out = gru_cell(Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 3))), p)
    assert np.array_equal(out.numpy(), np.zeros((4, 3)))


def test_gru_saturated_update_gate_keeps_state():
    rng = np.random.default_rng(1)
    p = _gru_params(2, 3, rng)
    p["b_z"] = Tensor(np.full((1, 3), 60.0))  # update gate -> 1
    h = rng.normal(size=(4, 3))
    out = gru_cell(Tensor(rng.normal(size=(4, 2))), Tensor(h), p)
    assert np.allclose(out.numpy(), h, atol=1e-12)


def test_gru_matches_scalar_oracle():
    """Step-by-step scalar evaluation of the three-gate equations at d_h=2."""
    rng = np.random.default_rng(2)
    d_in, d_h = 3, 2
    p = _gru_params(d_in, d_h, rng)
    w = {k: v.numpy() for k, v in p.items()}
    x = rng.normal(size=(1, d_in))
    h = rng.uniform(-0.9, 0.9, size=(1, d_h))
    out = gru_cell(Tensor(x), Tensor(h), p).numpy()

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    def affine(weight_x, weight_h, bias, state, j):
        return (sum(x[0, i] * weight_x[i, j] for i in range(d_in))
                + sum(state[i] * weight_h[i, j] for i in range(d_h))
                + bias[0, j])

    r = [sig(affine(w["w_xr"], w["w_hr"], w["b_r"], h[0], j)) for j in range(d_h)]
    z = [sig(affine(w["w_xz"], w["w_hz"], w["b_z"], h[0], j)) for j in range(d_h)]
    reset_state = [r[i] * h[0, i] for i in range(d_h)]
    cand = [math.tanh(affine(w["w_xn"], w["w_hn"], w["b_n"], reset_state, j)) for j in range(d_h)]
    expected = [(1 - z[j]) * cand[j] + z[j] * h[0, j] for j in range(d_h)]
    assert np.allclose(out[0], expected, atol=1e-12)
    assert np.all(np.abs(out) < 1.0)  # blend of tanh candidate and state in (-1, 1)


def test_gru_gradients_match_fd():
    rng = np.random.default_rng(3)
    d_in, d_h = 2, 3
    params = {k: v.numpy().copy() for k, v in _gru_params(d_in, d_h, rng).items()}
    x = rng.normal(size=(4, d_in))
    h = rng.normal(size=(4, d_h))
    proj = np.random.default_rng(9).normal(size=(4, d_h))

    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    xt, ht = Tensor(x, requires_grad=True), Tensor(h, requires_grad=True)
    (gru_cell(xt, ht, tensors) * proj).sum().backward()

    for name in list(params) + ["x", "h"]:
        target = {"x": x, "h": h}.get(name, params.get(name))

        def f():
            ps = {k: Tensor(v) for k, v in params.items()}
            with no_grad():
                out = gru_cell(Tensor(x), Tensor(h), ps)
            return float((out.numpy() * proj).sum())

        fd = finite_difference(f, target)
        got = {"x": xt.grad, "h": ht.grad}.get(name, None)
        if got is None:
            got = tensors[name].grad
        assert np.allclose(got, fd, rtol=1e-6, atol=1e-6), f"gru grad mismatch for {name}"


def test_gru_shape_mismatch():
    rng = np.random.default_rng(4)
    p = _gru_params(2, 3, rng)
    with pytest.raises(ValueError):
        gru_cell(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 3))), p)


# ---- batch normalization ----------------------------------------------------------------


def test_batchnorm_constant_features_map_to_zero():
    stats = RunningStats(3)
    x = Tensor(np.full((8, 3), 5.0))
    out = batchnorm_forward(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, training=True)
    assert np.allclose(out.numpy(), 0.0, atol=1e-12)


def test_batchnorm_training_standardizes():
    rng = np.random.default_rng(5)
    stats = RunningStats(4)
    x = Tensor(rng.normal(0, 10.0, size=(256, 4)))  # var >> eps so the check is tight
    out = batchnorm_forward(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), stats, training=True)
    assert np.allclose(out.numpy().mean(axis=0), 0.0, atol=1e-6)
    assert np.allclose(out.numpy().var(axis=0), 1.0, atol=1e-6)


def test_batchnorm_eval_uses_running_stats():
    stats = RunningStats(2)
    stats.mean[:] = [1.0, -1.0]
    stats.var[:] = [4.0, 9.0]
    x = Tensor(np.array([[3.0, 2.0]]))
    out = batchnorm_forward(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, training=False)
    expected = (x.numpy() - stats.mean) / np.sqrt(stats.var + 1e-5)
    assert np.allclose(out.numpy(), expected, atol=1e-12)


def test_batchnorm_batch_of_one_falls_back_to_running_stats():
    stats = RunningStats(2)
    stats.mean[:] = [2.0, 0.0]
    x = Tensor(np.array([[2.0, 3.0]]))
    out = batchnorm_forward(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, training=True)
    expected = (x.numpy() - stats.mean) / np.sqrt(stats.var + 1e-5)
    assert np.allclose(out.numpy(), expected, atol=1e-12)
    assert np.array_equal(stats.mean, [2.0, 0.0])  # unchanged: no batch statistics used


def test_batchnorm_updates_running_stats_with_momentum():
    stats = RunningStats(1)
    x = np.array([[1.0], [3.0]])
    batchnorm_forward(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), stats, training=True)
    assert np.allclose(stats.mean, 0.9 * 0.0 + 0.1 * 2.0)
    assert np.allclose(stats.var, 0.9 * 1.0 + 0.1 * 1.0)


def test_batchnorm_training_gradients_match_fd():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(12, 3))
    gamma = rng.normal(size=3)
    beta = rng.normal(size=3)
    proj = rng.normal(size=(12, 3))

    xt = Tensor(x, requires_grad=True)
    gt = Tensor(gamma, requires_grad=True)
    bt = Tensor(beta, requires_grad=True)
    out = batchnorm_forward(xt, gt, bt, RunningStats(3), training=True)
    (out * proj).sum().backward()

    for arr, got in ((x, xt.grad), (gamma, gt.grad), (beta, bt.grad)):
        def f():
            with no_grad():
                o = batchnorm_forward(Tensor(x), Tensor(gamma), Tensor(beta), RunningStats(3), training=True)
            return float((o.numpy() * proj).sum())

        fd = finite_difference(f, arr)
        assert np.allclose(got, fd, rtol=1e-6, atol=1e-6)


# ---- tape mechanics -----------------------------------------------------------------------


def test_second_backward_raises():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = (x * 2).sum()
    assert out._bwd is None
    out.backward()  # no-op, no gradient populated
    assert x.grad is None


@pytest.mark.filterwarnings("ignore:overflow")
def test_overflow_is_an_error():
    from pmmemnet.numcore import exp

    with pytest.raises(FloatingPointError):
        exp(Tensor(np.array([1000.0])))


def test_forward_determinism_bitwise():
    def run():
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        b = Tensor(rng.normal(size=(6, 6)))
        loss = (softmax(a @ b, axis=-1) * b).sum()
        loss.backward()
        return loss.numpy().copy(), a.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)
