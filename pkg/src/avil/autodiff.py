"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tape` records every differentiable operation executed while it is
active; :func:`backward` replays the records in reverse to accumulate
gradients on all tracked tensors. The op set is deliberately small: exactly
what a LeNet-style convolutional classifier with per-task linear heads
needs, plus a few helpers (reshape, add, scale, tensor_sum) used to compose
losses. No broadcasting beyond bias addition and scalar scaling.

Convolution is valid (no padding), stride 1, with cross-correlation
semantics (no kernel flip). Max pooling is non-overlapping 2x2, ties broken
by the first element in row-major window order so that training runs are
bit-reproducible.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """N-dimensional real array plus an optional gradient of the same shape.

    ``tracked`` marks participation in differentiation: ops record a backward
    rule only for tracked operands, and only tracked tensors receive a
    ``grad`` from :func:`backward`. Data is immutable by convention after an
    op creates it; only ``grad`` accumulates.
    """

    __slots__ = ("data", "grad", "tracked", "tape")

    def __init__(self, data, tracked=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.tracked = bool(tracked)
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    """The innermost tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one reverse-mode pass.

    Each record pairs the op's output with the backward rules of its tracked
    operands. Tapes are confined to the thread that opened them; independent
    tapes on separate threads do not interact.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, out, rules):
        self._records.append((out, rules))

    def __len__(self):
        return len(self._records)


def _make(data, inputs, rules):
    """Wrap an op result, recording backward rules if a tape is active."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        out.tracked = True
        out.tape = tape
        tape.record(out, tuple((t, fn) for t, fn in rules if t.tracked))
    return out


def backward(loss):
    """Accumulate gradients of ``loss`` onto every tracked tensor feeding it.

    Repeated calls without clearing grads accumulate additively. The replay
    walks the tape in reverse recording order, so a tensor consumed several
    times receives the sum of all branch contributions.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss.tape is None:
        raise ValueError("loss was not produced under an active tape")
    adjoint = {id(loss): (loss, np.ones_like(loss.data))}
    for out, rules in reversed(loss.tape._records):
        entry = adjoint.pop(id(out), None)
        if entry is None:
            continue
        _, g = entry
        if out.tracked:
            out.grad = g if out.grad is None else out.grad + g
        for inp, vjp in rules:
            contrib = vjp(g)
            prev = adjoint.get(id(inp))
            if prev is None:
                adjoint[id(inp)] = (inp, contrib)
            else:
                adjoint[id(inp)] = (inp, prev[1] + contrib)
    for tensor, g in adjoint.values():
        if tensor.tracked:
            tensor.grad = g if tensor.grad is None else tensor.grad + g


# ---------------------------------------------------------------------------
# operations


def _im2col(x, k):
    """Patch matrix (batch*out_h*out_w, cin*k*k) for valid stride-1 windows."""
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    win = win.transpose(0, 2, 3, 1, 4, 5)
    b, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win).reshape(b * ho * wo, -1), ho, wo


def linear(x, weight, bias):
    """x[batch,in] @ weight[in,out] + bias[out], bias broadcast over batch."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear inner dimensions disagree: x {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data + bias.data
    xd, wd = x.data, weight.data
    return _make(
        out,
        (x, weight, bias),
        (
            (x, lambda g: g @ wd.T),
            (weight, lambda g: xd.T @ g),
            (bias, lambda g: g.sum(axis=0)),
        ),
    )


def conv2d(x, kernels, bias):
    """Valid stride-1 cross-correlation of x[b,cin,h,w] with kernels[cout,cin,k,k]."""
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {x.shape} and {kernels.shape}")
    b, cin, h, w = x.shape
    cout, cin_k, k, k2 = kernels.shape
    if k != k2 or cin != cin_k:
        raise ShapeError(f"conv2d kernels {kernels.shape} do not match input {x.shape}")
    if h < k or w < k:
        raise ShapeError(f"conv2d kernel {kernels.shape} larger than input {x.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernels {kernels.shape}")
    col, ho, wo = _im2col(x.data, k)
    kmat = kernels.data.reshape(cout, -1)
    out2d = col @ kmat.T + bias.data
    out = out2d.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def d_kernels(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        return (g2d.T @ col).reshape(cout, cin, k, k)

    def d_bias(g):
        return g.sum(axis=(0, 2, 3))

    def d_x(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dcol = (g2d @ kmat).reshape(b, ho, wo, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
        dx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + ho, j : j + wo] += dcol[:, :, :, :, i, j]
        return dx

    return _make(out, (x, kernels, bias), ((x, d_x), (kernels, d_kernels), (bias, d_bias)))


def maxpool2(x):
    """Non-overlapping 2x2 max pool; gradient goes to the first row-major argmax."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects a 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even spatial dims, got {x.shape}")
    h2, w2 = h // 2, w // 2
    win = np.ascontiguousarray(
        x.data.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(b, c, h2, w2, 4)
    idx = win.argmax(axis=-1)  # first occurrence = first in row-major window order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def d_x(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        return dwin.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)

    return _make(out, (x,), ((x, d_x),))


def relu(x):
    """Elementwise max(0, x); gradient is zero at x == 0."""
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), ((x, lambda g: g * mask),))


def cross_entropy_mean(logits, labels):
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_mean expects 2-d logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels out of range [0,{k}): min={labels.min()} max={labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    softmax = ez / sez
    nll = np.log(sez)[:, 0] - z[np.arange(n), labels]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def d_logits(g):
        d = softmax.copy()
        d[np.arange(n), labels] -= 1
        return d * (g / n)

    return _make(loss, (logits,), ((logits, d_logits),))


def reshape(x, shape):
    orig = x.data.shape
    return _make(x.data.reshape(shape), (x,), ((x, lambda g: g.reshape(orig)),))


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add requires matching shapes, got {a.shape} and {b.shape}")
    return _make(a.data + b.data, (a, b), ((a, lambda g: g), (b, lambda g: g)))


def scale(x, c):
    """Multiply by a python scalar."""
    c = float(c)
    return _make(x.data * c, (x,), ((x, lambda g: g * c),))


def tensor_sum(x):
    """Sum of all elements, as a scalar tensor."""
    return _make(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        ((x, lambda g: np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=True)),),
    )
