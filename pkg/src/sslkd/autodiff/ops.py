"""Differentiable operations.

Every function accepts :class:`Tensor` objects (or anything ``np.asarray``
understands, treated as a constant) and returns a new :class:`Tensor`. When any
input is on a tape the operation is recorded with a closure computing the
vector-Jacobian product; otherwise it runs forward-only.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from ..errors import ContractError, DegenerateVectorError, InputTooShortError, NumericError, ShapeError
from .tensor import Tensor

NORM_EPS = 1e-12
LN_EPS = 1e-5


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs):
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("inputs belong to different tapes")
            tape = t.tape
    return tape


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite output")
    out = Tensor(data)
    tape = _tape_of(inputs)
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from e


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a, floor: float = 0.0) -> Tensor:
    """Natural log; values below ``floor`` are clamped (zero gradient there)."""
    a = as_tensor(a)
    if floor > 0.0:
        x = np.maximum(a.data, floor)
        live = a.data >= floor
        return _emit("log", np.log(x), (a,), lambda g: (np.where(live, g / x, 0.0),))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _emit("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = -(np.log1p(np.exp(-np.abs(x))) + np.maximum(-x, 0.0))
    return _emit("log_sigmoid", out, (a,), lambda g: (g * expit(-x),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _emit("gelu", x * cdf, (a,), bw)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    a = as_tensor(a)
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from e
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def bw(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] += g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return _emit("getitem", a.data[index], (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def pad_last(a, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    a = as_tensor(a)
    width = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    n = a.shape[-1]
    return _emit("pad_last", np.pad(a.data, width), (a,), lambda g: (g[..., left:left + n],))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}") from e

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
        inputs = (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ weight.data, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _emit("linear", out, inputs, bw)


# ---------------------------------------------------------------- normalisations

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _emit("log_softmax", out, (a,),
                 lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def _standardize(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    with np.errstate(over="ignore", invalid="ignore"):
        var = (xc * xc).mean(axis=-1, keepdims=True)
    if not np.all(np.isfinite(var)):
        raise NumericError("normalisation statistics overflowed")
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _standardize_grad(gh: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    return inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xhat, inv = _standardize(x.data, eps)

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        return (_standardize_grad(g * gamma.data, xhat, inv),
                (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _emit("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def group_norm(x, groups: int, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Group normalisation of [B, C, T] input over (channels in group, time)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3:
        raise ShapeError(f"group_norm expects [B, C, T], got {x.shape}")
    B, C, T = x.shape
    if C % groups or gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: C={C}, groups={groups}, gamma {gamma.shape}")
    xhat, inv = _standardize(x.data.reshape(B, groups, -1), eps)
    xhat3 = xhat.reshape(B, C, T)
    out = xhat3 * gamma.data[:, None] + beta.data[:, None]

    def bw(g):
        gh = (g * gamma.data[:, None]).reshape(B, groups, -1)
        gx = _standardize_grad(gh, xhat, inv).reshape(B, C, T)
        return gx, (g * xhat3).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return _emit("group_norm", out, (x, gamma, beta), bw)


def l2_normalize(a, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(n <= eps):
        raise DegenerateVectorError(f"vector norm below {eps}")
    out = a.data / n
    return _emit("l2_normalize", out, (a,),
                 lambda g: ((g - out * (g * out).sum(axis=axis, keepdims=True)) / n,))


def cosine_similarity(u, v, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``, clamped to [-1, 1].

    Raises :class:`DegenerateVectorError` if either norm is at most 1e-12.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[axis] != v.shape[axis]:
        raise ShapeError(f"cosine_similarity: {u.shape} vs {v.shape}")
    return clip(sum(l2_normalize(u, axis) * l2_normalize(v, axis), axis=axis), -1.0, 1.0)


# ---------------------------------------------------------------- convolution

def conv1d(x, kernel, stride: int = 1, groups: int = 1) -> Tensor:
    """Valid (unpadded, bias-free) 1-D convolution.

    ``x`` is [C_in, T] or [B, C_in, T]; ``kernel`` is [C_out, C_in // groups, K].
    Output length is ``(T - K) // stride + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    if x.ndim not in (2, 3) or kernel.ndim != 3:
        raise ShapeError(f"conv1d: input {x.shape}, kernel {kernel.shape}")
    unbatched = x.ndim == 2
    xb = x.data[None] if unbatched else x.data
    B, C_in, T = xb.shape
    C_out, C_g, K = kernel.shape
    if C_in != C_g * groups or C_out % groups:
        raise ShapeError(f"conv1d: input channels {C_in} vs kernel {kernel.shape} with groups={groups}")
    if T < K:
        raise InputTooShortError(f"conv1d: input length {T} shorter than kernel {K}")
    T_out = (T - K) // stride + 1
    span = stride * (T_out - 1) + 1
    O_g = C_out // groups
    xg = xb.reshape(B, groups, C_g, T)
    # im2col: [B, G, T_out, C_g * K] against weights [G, C_g * K, O_g]
    cols = sliding_window_view(xg, K, axis=-1)[..., ::stride, :][..., :T_out, :]
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 2, 4)).reshape(B, groups, T_out, C_g * K)
    wmat = kernel.data.reshape(groups, O_g, C_g * K)
    out = np.matmul(cols, np.ascontiguousarray(np.swapaxes(wmat, -1, -2)))
    out = np.ascontiguousarray(np.swapaxes(out, -1, -2)).reshape(B, C_out, T_out)

    def bw(g):
        g4 = np.ascontiguousarray(g).reshape(B, groups, O_g, T_out)
        # weight gradient: contract batch and time in one matmul per group
        gflat = np.ascontiguousarray(g4.transpose(1, 2, 0, 3)).reshape(groups, O_g, B * T_out)
        cflat = np.ascontiguousarray(cols.transpose(1, 0, 2, 3)).reshape(groups, B * T_out, C_g * K)
        gw = np.matmul(gflat, cflat).reshape(kernel.shape)
        if x.tape is None:
            return None, gw
        # [G, C_g * K, O_g] @ [B, G, O_g, T_out] keeps time last, so each tap scatters contiguous rows
        gcols = np.matmul(np.ascontiguousarray(np.swapaxes(wmat, -1, -2)), g4).reshape(B, groups, C_g, K, T_out)
        gx = np.zeros_like(xg)
        for k in range(K):
            gx[..., k:k + span:stride] += gcols[..., k, :]
        gx = gx.reshape(B, C_in, T)
        return (gx[0] if unbatched else gx), gw

    return _emit("conv1d", out[0] if unbatched else out, (x, kernel), bw)


def conv_output_length(T: int, K: int, stride: int) -> int:
    if T < K:
        raise InputTooShortError(f"length {T} shorter than kernel {K}")
    return (T - K) // stride + 1
