"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value with numpy and, when a tape is active and an
input requires a gradient, records a closure producing the input gradients.
Broadcasting is limited to expanding singleton axes between operands of equal
rank; python scalars are accepted as constants.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from pvectors.errors import DimensionError, StateError
from pvectors.tensor.tensor import Tensor, active_tape

BN_EPS = 1e-5
LN_EPS = 1e-5


def _emit(op: str, data: np.ndarray, inputs: Sequence, backward_fn) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor._wrap(data, track)
    if track:
        tape.record(op, inputs, out, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if len(a) != len(b):
        raise DimensionError(f"rank mismatch {a} vs {b}; only singleton expansion is supported")
    shape = []
    for i, (m, n) in enumerate(zip(a, b)):
        if m == n or n == 1:
            shape.append(m)
        elif m == 1:
            shape.append(n)
        else:
            raise DimensionError(f"cannot broadcast {a} with {b} on axis {i}")
    return tuple(shape)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_binary(a, b) -> None:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _broadcast_shape(a.shape, b.shape)
    for x in (a, b):
        if not isinstance(x, Tensor) and np.ndim(x) != 0:
            raise DimensionError("non-tensor operands must be scalars")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    _check_binary(a, b)
    out = _data(a) + _data(b)

    def backward(g):
        return (
            _reduce_to(g, a.shape) if isinstance(a, Tensor) else None,
            _reduce_to(g, b.shape) if isinstance(b, Tensor) else None,
        )

    return _emit("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    _check_binary(a, b)
    out = _data(a) - _data(b)

    def backward(g):
        return (
            _reduce_to(g, a.shape) if isinstance(a, Tensor) else None,
            _reduce_to(-g, b.shape) if isinstance(b, Tensor) else None,
        )

    return _emit("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    _check_binary(a, b)
    ad, bd = _data(a), _data(b)
    out = ad * bd

    def backward(g):
        return (
            _reduce_to(g * bd, a.shape) if isinstance(a, Tensor) else None,
            _reduce_to(g * ad, b.shape) if isinstance(b, Tensor) else None,
        )

    return _emit("mul", out, (a, b), backward)


def div(a, b) -> Tensor:
    _check_binary(a, b)
    ad, bd = _data(a), _data(b)
    out = ad / bd

    def backward(g):
        return (
            _reduce_to(g / bd, a.shape) if isinstance(a, Tensor) else None,
            _reduce_to(-g * ad / (bd * bd), b.shape) if isinstance(b, Tensor) else None,
        )

    return _emit("div", out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit("sqrt", out, (x,), lambda g: (g / (2.0 * out),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Two-sided form keeps tiny gates representable (sigmoid(-40) ~ 4e-18, not 0).
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


# Piecewise-linear ops report which branch they took while a list is installed
# here, so finite-difference probes can tell when a step crossed a kink.
_branch_log: Optional[list] = None


class branch_log:
    """Context manager collecting the active-branch patterns of relu and max."""

    def __enter__(self) -> list:
        global _branch_log
        self._prev, _branch_log = _branch_log, []
        return _branch_log

    def __exit__(self, *exc) -> None:
        global _branch_log
        _branch_log = self._prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _branch_log is not None:
        _branch_log.append(np.packbits(mask).tobytes())
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return _emit("mean", out, (x,), backward)


def max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximal index."""
    (ax,) = _norm_axis(axis, x.ndim)
    idx = np.expand_dims(x.data.argmax(axis=ax), ax)
    if _branch_log is not None:
        _branch_log.append(idx.tobytes())
    out = np.take_along_axis(x.data, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, g, axis=ax)
        return (gx,)

    return _emit("max", out, (x,), backward)


def pool(x: Tensor, axis: int, kind: str = "mean") -> Tensor:
    """Global pooling that removes ``axis``; ``kind`` is ``"mean"`` or ``"max"``."""
    if kind == "mean":
        return mean(x, axis)
    if kind == "max":
        return max(x, axis)
    raise ValueError(f"unknown pooling kind {kind!r}")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    src = x.shape
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, order) -> Tensor:
    order = tuple(order)
    if sorted(order) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {order} for rank {x.ndim}")
    inverse = tuple(np.argsort(order))
    out = np.ascontiguousarray(x.data.transpose(order))
    return _emit("permute", out, (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ndim = tensors[0].ndim
    (ax,) = _norm_axis(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise DimensionError(f"concat shape mismatch {t.shape} vs {tensors[0].shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        index = [slice(None)] * ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[ax] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return _emit("concat", out, tensors, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    (ax,) = _norm_axis(axis, x.ndim)
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    out = x.data[index].copy()
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[index] = g
        return (gx,)

    return _emit("slice", out, (x,), backward)


def split(x: Tensor, parts: int, axis: int) -> list:
    size = x.shape[axis]
    if size % parts:
        raise DimensionError(f"axis of size {size} not divisible into {parts} parts")
    step = size // parts
    return [slice_axis(x, axis, i * step, (i + 1) * step) for i in range(parts)]


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every frame on the last axis ``factor`` times."""
    if factor < 1 or int(factor) != factor:
        raise DimensionError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x
    out = np.repeat(x.data, factor, axis=-1)
    shape = x.shape

    def backward(g):
        return (g.reshape(shape + (factor,)).sum(axis=-1),)

    return _emit("upsample", out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D matrix shared across ``a``'s leading axes, or has the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    shared = bd.ndim == 2
    if shared:
        k = ad.shape[-1]
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        out = np.matmul(ad, bd)

    def backward(g):
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
        else:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def conv_out_len(length: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv1d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """1-D cross-correlation of ``x`` (B, Cin, T) or (Cin, T) with ``w`` (Cout, Cin, K)."""
    if x.ndim == 2:
        y = conv1d(reshape(x, (1,) + x.shape), w, bias, stride, dilation, padding)
        return reshape(y, y.shape[1:])
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"conv1d expects (B,C,T) input and (O,C,K) weight, got {x.shape}, {w.shape}")
    B, cin, T = x.shape
    cout, cin_w, K = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv1d channel mismatch: input {cin}, weight {cin_w}")
    if K < 1 or stride < 1 or dilation < 1 or padding < 0:
        raise DimensionError("conv1d needs K, stride, dilation >= 1 and padding >= 0")
    t_out = conv_out_len(T, K, stride, dilation, padding)
    if t_out < 1:
        raise DimensionError(f"conv1d output length {t_out} < 1 for T={T}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv1d bias shape {bias.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    wd = w.data
    span = stride * (t_out - 1) + 1
    taps = [slice(k * dilation, k * dilation + span, stride) for k in range(K)]
    # im2col: (B, Cin, K, T') so one GEMM covers every tap
    cols = np.stack([xp[:, :, sl] for sl in taps], axis=2) if K > 1 else xp[:, :, taps[0]][:, :, None]
    out = np.tensordot(wd, cols, axes=([1, 2], [1, 2])).transpose(1, 0, 2)
    if bias is not None:
        out = out + bias.data[:, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 3]))
        if x.requires_grad:
            gcols = np.tensordot(wd, g, axes=([0], [1]))  # (Cin, K, B, T')
            gxp = np.zeros((xp.shape[1], xp.shape[0], xp.shape[2]))
            for k, sl in enumerate(taps):
                gxp[:, :, sl] += gcols[:, k]
            gx = gxp[:, :, padding : padding + T].transpose(1, 0, 2)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    return _emit("conv1d", out, (x, w, bias), backward)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation of ``x`` (B, Cin, H, W) or (Cin, H, W)."""
    if x.ndim == 3:
        y = conv2d(reshape(x, (1,) + x.shape), w, bias, padding)
        return reshape(y, y.shape[1:])
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects (B,C,H,W) input and (O,C,Kh,Kw) weight, got {x.shape}, {w.shape}")
    B, cin, H, W = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    h_out, w_out = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"conv2d output {h_out}x{w_out} is empty")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({cout},)")

    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pads) if padding else x.data
    wd = w.data
    out = np.zeros((B, cout, h_out, w_out))
    windows = [(i, j) for i in range(kh) for j in range(kw)]
    for i, j in windows:
        out += np.einsum("oc,bchw->bohw", wd[:, :, i, j], xp[:, :, i : i + h_out, j : j + w_out])
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        gxp = np.zeros(xp.shape)
        gw = np.empty(wd.shape)
        for i, j in windows:
            patch = xp[:, :, i : i + h_out, j : j + w_out]
            gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, patch)
            gxp[:, :, i : i + h_out, j : j + w_out] += np.einsum("oc,bohw->bchw", wd[:, :, i, j], g)
        gx = gxp[:, :, padding : padding + H, padding : padding + W]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    return _emit("conv2d", out, (x, w, bias), backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization of (B, C) or (B, C, T) input.

    In training mode the batch statistics are used and the running buffers, when
    given, are updated in place (unbiased variance, like the common frameworks).
    """
    if x.ndim not in (2, 3):
        raise DimensionError(f"batchnorm1d expects (B,C) or (B,C,T), got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm1d params must have shape ({C},)")
    axes = (0,) if x.ndim == 2 else (0, 2)
    view = (1, C) if x.ndim == 2 else (1, C, 1)
    xd = x.data
    if training:
        n = xd.size // C
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var * (n / (n - 1) if n > 1 else 1.0)
    else:
        if running_mean is None or running_var is None:
            raise StateError("batchnorm1d in eval mode needs running statistics")
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def backward(g):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        scale = (gamma.data * inv_std).reshape(view)
        if training:
            m = xd.size // C
            gx = scale / m * (m * g - g_beta.reshape(view) - xhat * g_gamma.reshape(view))
        else:
            gx = g * scale
        return gx, g_gamma, g_beta

    return _emit("batchnorm1d", out, (x, gamma, beta), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layernorm params must have shape ({D},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
    xhat = (xd - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(xd.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        gh = g * gamma.data
        gx = inv_std * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gamma, g_beta

    return _emit("layernorm", out, (x, gamma, beta), backward)
