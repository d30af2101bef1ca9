"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is exactly what the forecaster needs: broadcast arithmetic,
stacked matmul, activations, softmax, reductions, row gather, stack,
a GRU cell and batch normalization. Every forward result is checked for
NaN/Inf; a non-finite value anywhere is a hard error, not a value.

Gradients are computed by walking the recorded graph once, in reverse
topological order. The graph is consumed by ``backward``; calling it a
second time without a fresh forward pass raises.
"""

from __future__ import annotations

import contextlib
import math
from typing import Mapping, Sequence

import numpy as np

_GRAD_ENABLED = True
_FINITE_CHECKS = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference / FD probes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Scoped override of per-op finiteness checks.

    Hot loops may disable them: NaN/Inf propagates through every op to the
    loss, where the loop checks explicitly.
    """
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _assert_finite(arr: np.ndarray, what: str) -> None:
    if not _FINITE_CHECKS:
        return
    # One-pass probe; only fall back to the exact scan when the sum is bad.
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {what}")


class Tensor:
    """A float64 array plus an optional backward edge into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_spent")

    # Make numpy defer to the reflected operators below instead of trying
    # to coerce a Tensor into an object array.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _assert_finite(self.data, "tensor creation")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None
        self._spent = False

    # ---- construction helpers -------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], bwd, what: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        _assert_finite(data, what)
        out.grad = None
        out._spent = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._bwd = bwd
        else:
            out.requires_grad = False
            out._parents = ()
            out._bwd = None
        return out

    # ---- basic introspection --------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- backward pass ----------------------------------------------------

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every reachable parameter's ``grad``.

        ``self`` must be scalar. The graph is freed as it is consumed, so a
        second call without a new forward pass raises.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if self._spent:
            raise RuntimeError("backward() already ran for this graph; run a new forward pass")
        if self._bwd is None:
            self._spent = True
            return

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)
            if node._parents:
                # Interior node: free the edge and its accumulated grad.
                node._parents = ()
                node._bwd = None
                if node is not self:
                    node.grad = None
        self._spent = True

    # ---- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_coerce(other), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, powc(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_coerce(other), self)

    def __pow__(self, p):
        return powc(self, p)

    def __abs__(self):
        return absval(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return Tensor._result(out_data, (a, b), bwd, "add")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(out_data, (a, b), bwd, "mul")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return Tensor._result(out_data, (a, b), bwd, "matmul")


def powc(a, p) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _coerce(a)
    p = float(p)
    # np.power is slow; special-case the exponents the model actually uses.
    if p == 2.0:
        out_data = a.data * a.data

        def bwd(g):
            _acc(a, g * (2.0 * a.data))

    elif p == -0.5:
        out_data = 1.0 / np.sqrt(a.data)

        def bwd(g):
            _acc(a, g * (-0.5 * out_data / a.data))

    elif p == -1.0:
        out_data = 1.0 / a.data

        def bwd(g):
            _acc(a, g * (-out_data * out_data))

    else:
        out_data = a.data ** p

        def bwd(g):
            _acc(a, g * (p * a.data ** (p - 1.0)))

    return Tensor._result(out_data, (a,), bwd, "pow")


def absval(a) -> Tensor:
    """|x| with subgradient 0 at x = 0."""
    a = _coerce(a)
    out_data = np.abs(a.data)

    def bwd(g):
        _acc(a, g * np.sign(a.data))

    return Tensor._result(out_data, (a,), bwd, "abs")


# ---- activations ------------------------------------------------------------


def relu(a) -> Tensor:
    a = _coerce(a)
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        _acc(a, g * (a.data > 0.0))

    return Tensor._result(out_data, (a,), bwd, "relu")


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    out_data = _sigmoid_data(a.data)

    def bwd(g):
        _acc(a, g * out_data * (1.0 - out_data))

    return Tensor._result(out_data, (a,), bwd, "sigmoid")


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-safe and faster than exp + where.
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(a) -> Tensor:
    a = _coerce(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        _acc(a, g * (1.0 - out_data * out_data))

    return Tensor._result(out_data, (a,), bwd, "tanh")


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _acc(a, g * out_data)

    return Tensor._result(out_data, (a,), bwd, "exp")


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; rows sum to 1."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _acc(a, out_data * (g - inner))

    return Tensor._result(out_data, (a,), bwd, "softmax")


# ---- reductions and shape ops ------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor._result(np.asarray(out_data), (a,), bwd, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(a.data.shape[ax] for ax in axes)
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        _acc(a, g.reshape(a.data.shape))

    return Tensor._result(out_data, (a,), bwd, "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _coerce(a)
    out_data = a.data.swapaxes(ax1, ax2)

    def bwd(g):
        _acc(a, g.swapaxes(ax1, ax2))

    return Tensor._result(out_data, (a,), bwd, "swapaxes")


def take_rows(a, indices) -> Tensor:
    """Gather rows of a 2-D tensor; output shape is indices.shape + (row_dim,).

    Backward scatter-adds into the source rows, so repeated indices
    accumulate (embedding-table semantics).
    """
    a = _coerce(a)
    if a.ndim != 2:
        raise ValueError("take_rows expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"row index out of range [0, {n})")
    out_data = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx.reshape(-1), g.reshape(-1, a.data.shape[1]))
            _acc(a, buf)

    return Tensor._result(out_data, (a,), bwd, "take_rows")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    out_data = np.stack([t.data for t in ts], axis=axis)

    def bwd(g):
        for i, t in enumerate(ts):
            _acc(t, np.take(g, i, axis=axis))

    return Tensor._result(out_data, tuple(ts), bwd, "stack")


# ---- recurrent cell -----------------------------------------------------------


def gru_cell(x: Tensor, h_prev: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """One GRU step: reset gate applied to the state before the candidate transform.

    Computes h' = (1 - z) * cand + z * h_prev with
    r = sigmoid(x W_xr + h W_hr + b_r), z likewise, and
    cand = tanh(x W_xn + (r * h) W_hn + b_n).
    ``params`` needs w_xr/w_hr/b_r, w_xz/w_hz/b_z, w_xn/w_hn/b_n with
    w_x* of shape (d_in, d_h) and w_h* of shape (d_h, d_h). Fused into one
    tape node; the backward pass is hand-derived.
    """
    x, h_prev = _coerce(x), _coerce(h_prev)
    if x.ndim != 2 or h_prev.ndim != 2:
        raise ValueError("gru_cell expects 2-D x and h_prev")
    p = {k: _coerce(v) for k, v in params.items()}
    xd, hd = x.data, h_prev.data
    if xd.shape[0] != hd.shape[0] or xd.shape[1] != p["w_xr"].data.shape[0] \
            or hd.shape[1] != p["w_hr"].data.shape[0]:
        raise ValueError("gru_cell shape mismatch between inputs and parameters")

    r = _sigmoid_data(xd @ p["w_xr"].data + hd @ p["w_hr"].data + p["b_r"].data)
    z = _sigmoid_data(xd @ p["w_xz"].data + hd @ p["w_hz"].data + p["b_z"].data)
    rh = r * hd
    cand = np.tanh(xd @ p["w_xn"].data + rh @ p["w_hn"].data + p["b_n"].data)
    out_data = (1.0 - z) * cand + z * hd

    def bwd(g):
        d_cand = g * (1.0 - z) * (1.0 - cand * cand)
        d_z = g * (hd - cand) * z * (1.0 - z)
        d_rh = d_cand @ p["w_hn"].data.T
        d_r = d_rh * hd * r * (1.0 - r)
        _acc(p["w_xn"], xd.T @ d_cand)
        _acc(p["w_hn"], rh.T @ d_cand)
        _acc(p["b_n"], d_cand.sum(axis=0, keepdims=True))
        _acc(p["w_xz"], xd.T @ d_z)
        _acc(p["w_hz"], hd.T @ d_z)
        _acc(p["b_z"], d_z.sum(axis=0, keepdims=True))
        _acc(p["w_xr"], xd.T @ d_r)
        _acc(p["w_hr"], hd.T @ d_r)
        _acc(p["b_r"], d_r.sum(axis=0, keepdims=True))
        if x.requires_grad:
            _acc(x, d_r @ p["w_xr"].data.T + d_z @ p["w_xz"].data.T + d_cand @ p["w_xn"].data.T)
        if h_prev.requires_grad:
            _acc(
                h_prev,
                g * z
                + d_rh * r
                + d_r @ p["w_hr"].data.T
                + d_z @ p["w_hz"].data.T,
            )

    parents = (x, h_prev) + tuple(p[k] for k in ("w_xr", "w_hr", "b_r", "w_xz", "w_hz", "b_z", "w_xn", "w_hn", "b_n"))
    return Tensor._result(out_data, parents, bwd, "gru_cell")


# ---- batch normalization -------------------------------------------------------


class RunningStats:
    """Per-feature running mean/variance for batch normalization."""

    __slots__ = ("mean", "var")

    def __init__(self, dim: int):
        self.mean = np.zeros(dim, dtype=np.float64)
        self.var = np.ones(dim, dtype=np.float64)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, momentum: float) -> None:
        # In place: checkpoint state arrays alias these buffers.
        self.mean *= 1.0 - momentum
        self.mean += momentum * batch_mean
        self.var *= 1.0 - momentum
        self.var += momentum * batch_var


def batchnorm_forward(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize the last axis per feature over all leading axes.

    Training mode uses batch statistics and folds them into the running
    stats; eval mode (and single-sample training batches) uses the running
    stats as constants.
    """
    x = _coerce(x)
    gamma, beta = _coerce(gamma), _coerce(beta)
    dim = x.shape[-1]
    n_batch = x.size // dim if dim else 0
    if training and n_batch > 1:
        return _batchnorm_train(x, gamma, beta, stats, momentum, eps)
    scale = 1.0 / np.sqrt(stats.var + eps)
    y = (x - stats.mean) * scale
    return y * gamma + beta


def _batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                     momentum: float, eps: float) -> Tensor:
    """Fused training-mode batchnorm with the standard hand-derived backward."""
    dim = x.shape[-1]
    axes = tuple(range(x.ndim - 1))
    m = x.size // dim
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    out_data = y * gamma.data + beta.data
    stats.update(mean.reshape(dim), var.reshape(dim), momentum)

    def bwd(g):
        _acc(beta, g.sum(axis=axes).reshape(beta.data.shape))
        _acc(gamma, (g * y).sum(axis=axes).reshape(gamma.data.shape))
        if x.requires_grad:
            gy = g * gamma.data
            term = gy.sum(axis=axes, keepdims=True) + y * (gy * y).sum(axis=axes, keepdims=True)
            _acc(x, inv * (gy - term / m))

    return Tensor._result(out_data, (x, gamma, beta), bwd, "batchnorm")
