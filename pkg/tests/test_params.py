import numpy as np
import pytest

from pmmemnet.numcore import ParamStore, adam_step, grad_check, xavier_uniform


def test_xavier_bounds_and_determinism():
    a = xavier_uniform(np.random.default_rng(0), (20, 30))
    b = xavier_uniform(np.random.default_rng(0), (20, 30))
    limit = np.sqrt(6.0 / 50.0)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= limit)


def test_store_registration_and_inits():
    st = ParamStore(seed=0)
    w = st.add("w", (3, 4))
    b = st.add("b", (4,), init="zeros")
    g = st.add("g", (4,), init="ones")
    assert w.shape == (3, 4) and w.requires_grad
    assert np.array_equal(b.numpy(), np.zeros(4))
    assert np.array_equal(g.numpy(), np.ones(4))
    with pytest.raises(ValueError):
        st.add("w", (1, 1))
    with pytest.raises(ValueError):
        st.add("bad", (2, 2), init="nope")


def test_store_seed_determinism():
    def build(seed):
        st = ParamStore(seed=seed)
        st.add("a", (4, 4))
        st.add("b", (2, 6))
        return np.concatenate([st["a"].numpy().ravel(), st["b"].numpy().ravel()])

    assert np.array_equal(build(3), build(3))
    assert not np.array_equal(build(3), build(4))


def test_adam_single_step_hand_expansion():
    """From zero moments the first update is -lr * g / (|g| + eps)."""
    st = ParamStore(seed=0)
    p = st.add("p", (3,), init="zeros")
    g = np.array([0.5, -2.0, 1e-3])
    p.grad = g.copy()
    lr, eps = 0.01, 1e-8
    adam_step(st, lr=lr, eps=eps)
    expected = -lr * g / (np.abs(g) + eps)
    assert np.allclose(p.numpy(), expected, atol=1e-15)
    assert p.grad is None  # gradients zeroed afterward
    assert st.step_count == 1


def test_adam_zero_gradient_is_identity():
    st = ParamStore(seed=1)
    p = st.add("p", (2, 2))
    before = p.numpy().copy()
    p.grad = np.zeros((2, 2))
    adam_step(st)
    assert np.array_equal(p.numpy(), before)


def test_adam_unpopulated_gradients_error():
    st = ParamStore(seed=0)
    st.add("p", (2,), init="zeros")
    with pytest.raises(RuntimeError):
        adam_step(st)


def test_adam_gradient_shape_mismatch():
    st = ParamStore(seed=0)
    p = st.add("p", (2,), init="zeros")
    p.grad = np.zeros(3)
    with pytest.raises(ValueError):
        adam_step(st)


def test_adam_determinism_bitwise():
    def run():
        st = ParamStore(seed=5)
        p = st.add("p", (4, 4))
        for step in range(10):
            loss = ((p * p).sum() * 0.5 + p.sum())
            loss.backward()
            adam_step(st, lr=0.05)
        return p.numpy().copy()

    assert np.array_equal(run(), run())


def test_state_dict_roundtrip():
    st = ParamStore(seed=2)
    p = st.add("p", (3, 3))
    st.add_state("running", np.arange(3.0))
    p.grad = np.ones((3, 3))
    adam_step(st)
    snap = st.state_dict()

    st2 = ParamStore(seed=99)
    st2.add("p", (3, 3))
    st2.add_state("running", np.zeros(3))
    st2.load_state_dict(snap)
    assert np.array_equal(st2["p"].numpy(), st["p"].numpy())
    assert np.array_equal(st2.state_arrays()["running"], np.arange(3.0))
    assert st2.step_count == 1
    with pytest.raises(ValueError):
        st2.load_state_dict({"params": {"unknown": np.zeros(1)}})


# ---- grad_check harness ------------------------------------------------------------


def test_grad_check_quadratic():
    """f(t) = t^2 at t = 3: tape says 6, central differences say 6."""
    st = ParamStore(seed=0)
    t = st.add("t", (1,), init=np.array([3.0]))
    err = grad_check(lambda: (t * t).sum(), st)
    assert err < 1e-8


def test_grad_check_linear_is_exact():
    st = ParamStore(seed=0)
    t = st.add("t", (4,), init="zeros")
    c = np.array([1.0, -2.0, 3.0, 0.5])
    err = grad_check(lambda: (t * c).sum(), st)
    assert err < 1e-10


def test_grad_check_covers_every_parameter():
    st = ParamStore(seed=3)
    a = st.add("a", (2, 3))
    b = st.add("b", (3, 2))
    from pmmemnet.numcore import tanh

    err = grad_check(lambda: tanh(a @ b).sum(), st, coords_per_param=100)
    assert err < 1e-6


def test_grad_check_rejects_nonscalar():
    st = ParamStore(seed=0)
    t = st.add("t", (2,), init="zeros")
    with pytest.raises(ValueError):
        grad_check(lambda: t * 1.0, st)
