"""Differentiable operations used by the residual-network blocks.

Every op takes and returns :class:`~shakedrop.autograd.Tensor` and registers
its own backward rule through :func:`~shakedrop.autograd.record`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from shakedrop.autograd import Tensor, as_tensor, record

ArrayLike = Union[Tensor, np.ndarray, float]


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record("add", out, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return record("mul", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,),
                  lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record("sum", np.asarray(x.data.sum()), (x,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record("mean", np.asarray(x.data.mean()), (x,),
                  lambda g: (np.broadcast_to(g / n, shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return record("reshape", x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(old),))


# convolution / pooling -----------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv2d output size not exact: ({size} + 2*{padding} - {k}) / {stride}"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIHW weight.

    The output size must divide exactly; ``(H + 2*padding - kH) % stride != 0``
    raises ``ValueError`` rather than silently dropping rows.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weight")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError("stride must be >= 1, padding >= 0, groups >= 1")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i * groups or o % groups != 0:
        raise ValueError(f"channel mismatch: input C={c}, weight I={i}, groups={groups}")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(wd, kw, stride, padding)
    og = o // groups
    s = stride

    # per-offset im2col: cols[k] holds the (n, y, x) × channel slab seen by offset k
    xp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + wd, :] = x.data.transpose(0, 2, 3, 1)
    offsets = [(a, b) for a in range(kh) for b in range(kw)]
    m = n * ho * wo
    cols = np.empty((kh * kw, n, ho, wo, c), dtype=x.dtype)
    for k, (a, b) in enumerate(offsets):
        cols[k] = xp[:, a:a + s * ho:s, b:b + s * wo:s, :]
    cols = cols.reshape(kh * kw, m, c)
    # grouped weights become block-diagonal (K, C, O) matrices
    wk = np.zeros((kh * kw, c, o), dtype=w.dtype)
    for gi in range(groups):
        blk = w.data[gi * og:(gi + 1) * og].reshape(og, i, kh * kw).transpose(2, 1, 0)
        wk[:, gi * i:(gi + 1) * i, gi * og:(gi + 1) * og] = blk
    out = cols[0] @ wk[0]
    for k in range(1, kh * kw):
        out += cols[k] @ wk[k]
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(m, o)
        dwk = np.empty((kh * kw, c, o), dtype=g.dtype)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for k, (a, b) in enumerate(offsets):
            dwk[k] = cols[k].T @ g2
            dxp[:, a:a + s * ho:s, b:b + s * wo:s, :] += (g2 @ wk[k].T).reshape(n, ho, wo, c)
        dw = np.empty((o, i, kh * kw), dtype=g.dtype)
        for gi in range(groups):
            blk = dwk[:, gi * i:(gi + 1) * i, gi * og:(gi + 1) * og]
            dw[gi * og:(gi + 1) * og] = blk.transpose(2, 1, 0)
        dx = dxp[:, padding:padding + h, padding:padding + wd, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), dw.reshape(o, i, kh, kw)

    return record("conv2d", np.ascontiguousarray(out), (x, w), backward,
                  stride=stride, padding=padding, groups=groups)


def subsample2d(x: Tensor, step: int = 2) -> Tensor:
    """Keep every ``step``-th row and column (parameter-free spatial downsampling)."""
    shape = x.shape
    out = np.ascontiguousarray(x.data[:, :, ::step, ::step])

    def backward(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[:, :, ::step, ::step] = g
        return (dx,)

    return record("subsample2d", out, (x,), backward)


def pad_channels(x: Tensor, out_channels: int) -> Tensor:
    """Append zero channels so the result has ``out_channels`` channels."""
    c = x.shape[1]
    if out_channels < c:
        raise ValueError(f"cannot pad {c} channels down to {out_channels}")
    if out_channels == c:
        return x
    widths = [(0, 0)] * x.ndim
    widths[1] = (0, out_channels - c)
    return record("pad_channels", np.pad(x.data, widths), (x,), lambda g: (g[:, :c],))


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC mean over the spatial axes."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return record("global_avg_pool", out, (x,), backward)


# dense ---------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``x`` N×D, ``w`` D×K, ``b`` K."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ValueError("linear expects N×D input, D×K weight and K bias")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {x.shape} @ {w.shape} + {b.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return record("linear", out, (x, w, b), backward)


# normalization -------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics of one batch-norm unit."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batchnorm2d(x: Tensor, gamma: Tensor, shift: Tensor, state: BatchNormState,
                training: bool) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    In training the batch statistics normalize the input and the running
    mean/variance are updated by an exponential moving average (unbiased
    variance). In evaluation the running statistics are used and nothing
    is updated.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"gamma/shift must have shape ({c},)")
    eps = state.eps
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm2d in training needs N*H*W >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered ** 2).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mean
        state.running_var = (1 - mom) * state.running_var + mom * var * (m / (m - 1))

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dshift = g.sum(axis=(0, 2, 3))
            dxhat = g * g4
            dx = (inv_std.reshape(1, c, 1, 1) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return dx, dgamma, dshift
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)

        def backward(g):
            return (g * g4 * inv_std.reshape(1, c, 1, 1),
                    (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

    out = xhat * g4 + shift.data.reshape(1, c, 1, 1)
    return record("batchnorm2d", out, (x, gamma, shift), backward)


# loss ----------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch.

    ``labels`` is either an integer vector in ``[0, K)`` or an N×K matrix of
    soft labels (rows summing to one, as produced by mixup).
    """
    if logits.ndim != 2:
        raise ValueError("logits must be N×K")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if labels.shape[0] != n:
            raise ValueError("label count does not match batch size")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("hard labels must be integers")
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
            raise ValueError(f"label out of range [0, {k})")
        target = np.zeros((n, k), dtype=logits.dtype)
        target[np.arange(n), labels] = 1.0
    elif labels.shape == (n, k):
        target = labels.astype(logits.dtype, copy=False)
    else:
        raise ValueError(f"soft labels must have shape {(n, k)}")
    logp = log_softmax(logits.data)
    loss = -(target * logp).sum() / n

    def backward(g):
        p = np.exp(logp)
        return (g * (p * target.sum(axis=1, keepdims=True) - target) / n,)

    return record("softmax_cross_entropy", np.asarray(loss), (logits,), backward)


# decoupled scaling ---------------------------------------------------------

def decoupled_scale(x: Tensor, forward_coef: np.ndarray, backward_coef) -> Tensor:
    """Multiply by ``forward_coef`` going forward and ``backward_coef`` going back.

    ``backward_coef`` is an array or a zero-argument callable evaluated each
    time the backward rule runs, which lets coefficients be drawn lazily at
    backward time.
    """
    out = forward_coef * x.data
    out = np.broadcast_to(out, x.shape).astype(x.dtype, copy=False)

    def backward(g):
        coef = backward_coef() if callable(backward_coef) else backward_coef
        return (unbroadcast(coef * g, x.shape),)

    return record("decoupled_scale", out, (x,), backward)


def decoupled_mix(f1: Tensor, f2: Tensor, forward_coef: np.ndarray, backward_coef) -> Tensor:
    """``a*f1 + (1-a)*f2`` forward; gradients ``b*g`` and ``(1-b)*g`` backward."""
    if f1.shape != f2.shape:
        raise ValueError(f"branch shapes differ: {f1.shape} vs {f2.shape}")
    out = forward_coef * f1.data + (1.0 - forward_coef) * f2.data

    def backward(g):
        coef = backward_coef() if callable(backward_coef) else backward_coef
        return unbroadcast(coef * g, f1.shape), unbroadcast((1.0 - coef) * g, f2.shape)

    return record("decoupled_mix", out, (f1, f2), backward)
