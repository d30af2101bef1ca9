"""Named parameter storage, initialization and the Adam optimizer."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, _assert_finite


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Glorot uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) != 2:
        raise ValueError("xavier init expects a 2-D shape")
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """Owns every learnable tensor plus its Adam moments and step counter.

    Non-trainable state arrays (batchnorm running statistics) live here too
    so a single object round-trips through checkpoints. Names are unique;
    insertion order is the serialization order, which keeps seeded
    initialization fully deterministic.
    """

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}
        self._state: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    # ---- registration -----------------------------------------------------

    def add(self, name: str, shape: tuple[int, ...], init: str = "xavier") -> Tensor:
        if name in self._params or name in self._state:
            raise ValueError(f"duplicate parameter name {name!r}")
        if isinstance(init, np.ndarray):
            data = np.array(init, dtype=np.float64)
            if data.shape != tuple(shape):
                raise ValueError(f"init array shape {data.shape} != {shape}")
        elif init == "xavier":
            data = xavier_uniform(self.rng, tuple(shape))
        elif init == "zeros":
            data = np.zeros(shape, dtype=np.float64)
        elif init == "ones":
            data = np.ones(shape, dtype=np.float64)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros(data.shape, dtype=np.float64)
        self._v[name] = np.zeros(data.shape, dtype=np.float64)
        return t

    def add_state(self, name: str, array: np.ndarray) -> np.ndarray:
        if name in self._params or name in self._state:
            raise ValueError(f"duplicate state name {name!r}")
        self._state[name] = np.asarray(array, dtype=np.float64)
        return self._state[name]

    # ---- access -------------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self._state

    @property
    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    # ---- gradients ------------------------------------------------------------

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads_populated(self) -> bool:
        return any(t.grad is not None for t in self._params.values())

    # ---- serialization --------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "params": {n: t.data.copy() for n, t in self._params.items()},
            "state": {n: a.copy() for n, a in self._state.items()},
            "m": {n: a.copy() for n, a in self._m.items()},
            "v": {n: a.copy() for n, a in self._v.items()},
            "step": self.step_count,
        }

    def load_state_dict(self, d: dict) -> None:
        for n, arr in d["params"].items():
            if n not in self._params:
                raise ValueError(f"unknown parameter {n!r} in state dict")
            if self._params[n].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {n!r}")
            self._params[n].data = np.array(arr, dtype=np.float64)
        for n, arr in d.get("state", {}).items():
            if n not in self._state:
                raise ValueError(f"unknown state array {n!r} in state dict")
            self._state[n][...] = arr
        for n, arr in d.get("m", {}).items():
            self._m[n][...] = arr
        for n, arr in d.get("v", {}).items():
            self._v[n][...] = arr
        self.step_count = int(d.get("step", 0))


def adam_step(
    store: ParamStore,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update over every parameter; grads reset afterward.

    Parameters untouched by the last backward pass (grad ``None``) see a
    zero gradient: their moments decay but a fresh store leaves them
    unchanged. Raises when no gradient at all has been populated.
    """
    if not store.grads_populated():
        raise RuntimeError("adam_step called before any backward pass populated gradients")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        if g is None:
            g = 0.0
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        _assert_finite(p.data, f"adam update of {name!r}")
        p.grad = None
