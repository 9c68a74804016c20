"""Finite-difference checks for analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 3e-4, coords=None) -> np.ndarray:
    """Five-point central differences of ``f`` at ``x``; only ``coords`` (flat indices) if given.

    The stencil is fourth-order accurate, so a fairly large ``eps`` keeps round-off small
    without adding truncation error.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        vals = []
        for step in (2.0, 1.0, -1.0, -2.0):
            flat[i] = old + step * eps
            vals.append(f(x))
        flat[i] = old
        # pair the differences first so coordinates f ignores come out exactly zero
        out[i] = ((vals[3] - vals[0]) + 8.0 * (vals[1] - vals[2])) / (12.0 * eps)
    return out.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 3e-4) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    The error for each coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    loss = f(tape.watch("x", x))
    analytic = backward(tape, loss)["x"]
    numeric = numeric_grad(lambda v: f(Tensor(v)).item(), x, eps)
    return _rel_err(analytic, numeric)


def grad_check_params(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 3e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter max relative error for a scalar function of a parameter dict.

    With ``max_coords`` set, each tensor is checked on at most that many randomly
    chosen coordinates (always at least one per tensor).
    """
    rng = np.random.default_rng(seed)
    tape = Tape()
    analytic = backward(tape, f(tape.watch_all(params)))
    errors = {}
    for name, value in params.items():
        n = value.size
        coords = None
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))

        def at(v, name=name):
            trial = {k: Tensor(v if k == name else p) for k, p in params.items()}
            return f(trial).item()

        numeric = numeric_grad(at, value, eps, coords)
        a = analytic[name]
        if coords is not None:
            a, numeric = a.reshape(-1)[coords], numeric.reshape(-1)[coords]
        errors[name] = _rel_err(a, numeric)
    return errors
