"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .params import ParamStore
from .tensor import Tensor, no_grad


def grad_check(
    f: Callable[[], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    coords_per_param: int = 8,
    rng: int | np.random.Generator = 0,
    param_names: Sequence[str] | None = None,
) -> float:
    """Compare tape gradients of scalar ``f`` against central differences.

    Samples up to ``coords_per_param`` coordinates from every parameter
    (always at least one per parameter, so each group is covered) and
    returns max over samples of |g_tape - g_fd| / max(1, |g_fd|).

    ``f`` must be deterministic and must not mutate the store; batchnorm
    has to run in eval mode so the perturbed evaluations see the same
    statistics.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    names = list(param_names) if param_names is not None else store.names()

    store.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ValueError("grad_check target must be scalar")
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss in grad_check")
    loss.backward()
    tape = {}
    for name in names:
        p = store[name]
        tape[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    store.zero_grad()

    worst = 0.0
    for name in names:
        p = store[name]
        n = p.data.size
        take = min(n, max(1, coords_per_param))
        coords = rng.choice(n, size=take, replace=False) if take < n else np.arange(n)
        flat = p.data.reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                hi = float(f().data)
                flat[i] = orig - eps
                lo = float(f().data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            rel = abs(tape[name].reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, rel)
    return worst
