"""Minimal reverse-mode autodiff on numpy arrays.

Only the operations needed by the micro-CNN family are implemented:
conv2d, 2x2 max-pooling, relu, broadcast add, matmul, global average
pooling, softmax, elementwise multiply, sum, and a fused softmax
cross-entropy loss. Values default to float32; gradient checks may run
the same ops in float64 by constructing float64 tensors.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """N-d array with an optional gradient tape.

    ``values`` is stored row-major. ``grad`` is populated by ``backward``
    and always matches ``values`` in shape.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        arr = np.asarray(values)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.values, requires_grad=False)

    def backward(self):
        """Backpropagate from a scalar tensor through the recorded tape."""
        if self.values.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.values.shape}")
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            topo.append(node)

        visit(self)
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_tape(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _accumulate(t, g):
    if not (t.requires_grad or t._parents):
        return
    g = np.asarray(g, dtype=t.values.dtype)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(values, parents, backward_fn):
    out = Tensor(values)
    if _needs_tape(*parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_values = a.values + b.values

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    return _node(out_values, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_values = a.values * b.values

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _node(out_values, (a, b), backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.values > 0
    out_values = np.where(mask, x.values, 0)

    def backward(g):
        _accumulate(x, g * mask)

    return _node(out_values, (x,), backward)


def reshape(x, shape):
    x = _as_tensor(x)
    in_shape = x.values.shape
    out_values = x.values.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(in_shape))

    return _node(out_values, (x,), backward)


def transpose2d(x):
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ValueError(f"transpose2d expects a 2-d tensor, got {x.values.shape}")

    def backward(g):
        _accumulate(x, g.T)

    return _node(x.values.T, (x,), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(
            f"matmul expects 2-d operands, got {a.values.shape} and {b.values.shape}")
    out_values = a.values @ b.values

    def backward(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _node(out_values, (a, b), backward)


def conv2d(x, kernel, stride=1, padding=0):
    """2-d cross-correlation, NCHW input against OIHW kernel.

    Output spatial size is floor((H + 2*padding - kH) / stride) + 1.
    Gradients flow to both the input and the kernel.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.values.ndim != 4 or kernel.values.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input/kernel, got input {x.values.shape} "
            f"and kernel {kernel.values.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    n, c, h, w = x.values.shape
    o, i, kh, kw = kernel.values.shape
    if c != i:
        raise ValueError(
            f"channel mismatch: input NCHW {x.values.shape} has {c} channels "
            f"but kernel OIHW {kernel.values.shape} expects {i}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"kernel {kernel.values.shape} larger than padded input {x.values.shape} "
            f"(padding={padding})")

    xp = x.values
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    # im2col: one BLAS matmul instead of a python loop over positions
    col = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw)
    kmat = kernel.values.reshape(o, c * kh * kw)
    out_values = (col @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gcol = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        _accumulate(kernel, (gcol.T @ col).reshape(o, c, kh, kw))
        if x.requires_grad or x._parents:
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    contrib = (gcol @ kernel.values[:, :, di, dj])
                    contrib = contrib.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                    gxp[:, :, di:di + stride * ho:stride,
                        dj:dj + stride * wo:stride] += contrib
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, gxp)

    return _node(out_values, (x, kernel), backward)


def max_pool2x2(x):
    """2x2 max pooling with stride 2; spatial dims must be even.

    Ties within a window route the gradient to the first maximal element
    (row-major), keeping backward deterministic.
    """
    x = _as_tensor(x)
    n, c, h, w = x.values.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2x2 needs even spatial dims, got {x.values.shape}")
    ho, wo = h // 2, w // 2
    win = x.values.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out_values = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, gx)

    return _node(out_values, (x,), backward)


def global_avg_pool(x):
    x = _as_tensor(x)
    n, c, h, w = x.values.shape
    out_values = x.values.mean(axis=(2, 3))

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)))

    return _node(out_values, (x,), backward)


def softmax(x):
    """Softmax over the last axis, shift-invariant by construction."""
    x = _as_tensor(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(x, p * (g - dot))

    return _node(p, (x,), backward)


def tensor_sum(x):
    x = _as_tensor(x)
    out_values = np.asarray(x.values.sum(dtype=np.float64), dtype=x.values.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.values.shape))

    return _node(out_values, (x,), backward)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` against softmax(logits).

    The loss value is accumulated in float64; the gradient matches the
    logits dtype.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.values.ndim != 2:
        raise ValueError(f"expected (N, K) logits, got {logits.values.shape}")
    n, k = logits.values.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k - 1}]")

    z = logits.values.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[np.arange(n), labels]
    out_values = np.asarray(losses.mean())

    def backward(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, (float(g) / n) * p.astype(logits.values.dtype))

    return _node(out_values, (logits,), backward)
