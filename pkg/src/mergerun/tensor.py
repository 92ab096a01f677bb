"""Dense tensors with reverse-mode automatic differentiation.

Everything in this package computes on :class:`Tensor`, a thin wrapper
around a contiguous numpy array that records the computation graph needed
to back-propagate gradients. Ops are plain functions: each computes its
result eagerly with numpy and attaches a backward rule. The graph is a DAG
of tensors linked through parent references; ``Tensor.backward`` replays it
in reverse topological order, so gradient accumulation order is fixed for a
fixed graph and repeated runs are bit-identical.

Convolution follows cross-correlation semantics (no kernel flip) and is
evaluated as im2col plus one matrix multiply per batch.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class DimensionError(ValueError):
    """Operand shapes or dtypes do not conform."""


class NumericError(ArithmeticError):
    """An operation produced or received non-finite values."""


_FINITE_CHECKS = False


class finite_checks:
    """Context manager: every op validates that its output is finite.

    Off by default (the scan costs a pass over each activation); the
    training loop enables it to locate the op responsible for a NaN loss.
    """

    def __enter__(self):
        global _FINITE_CHECKS
        self._saved = _FINITE_CHECKS
        _FINITE_CHECKS = True
        return self

    def __exit__(self, *exc):
        global _FINITE_CHECKS
        _FINITE_CHECKS = self._saved
        return False


class Tensor:
    """Dense n-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad.

        Must be called on a scalar (single-element) tensor. Gradients sum
        over all paths; the traversal order is a fixed function of the
        graph, so accumulation is deterministic.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"


def _result(data, op, parents, backward):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _check_conforming(op, *tensors):
    first = tensors[0]
    for t in tensors[1:]:
        if t.data.shape != first.data.shape:
            raise DimensionError(
                f"{op}: shape mismatch {first.data.shape} vs {t.data.shape}"
            )
        if t.data.dtype != first.data.dtype:
            raise DimensionError(
                f"{op}: dtype mismatch {first.data.dtype} vs {t.data.dtype}"
            )


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    _check_conforming("add", a, b)

    def backward(g):
        return g, g

    return _result(a.data + b.data, "add", (a, b), backward)


def scale(a, s):
    """Multiply a tensor by a python scalar."""
    s = float(s)

    def backward(g):
        return (g * s,)

    return _result(a.data * s, "scale", (a,), backward)


def average_n(inputs):
    """Elementwise mean of n same-shape tensors."""
    if not inputs:
        raise ValueError("average_n needs at least one input")
    _check_conforming("average_n", *inputs)
    n = len(inputs)
    acc = inputs[0].data.copy()
    for t in inputs[1:]:
        acc += t.data
    acc /= n

    def backward(g):
        gn = g / n
        return tuple(gn for _ in inputs)

    return _result(acc, "average_n", tuple(inputs), backward)


def relu(a):
    def backward(g):
        return (g * (a.data > 0),)

    return _result(np.maximum(a.data, 0), "relu", (a,), backward)


def tensor_sum(a):
    """Sum all elements to a scalar."""

    def backward(g):
        return (np.full_like(a.data, float(g)),)

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), "sum", (a,), backward)


def weighted_sum(a, weights):
    """Scalar projection sum(a * weights) against a constant array."""
    w = np.asarray(weights, dtype=a.data.dtype)
    if w.shape != a.data.shape:
        raise DimensionError(f"weighted_sum: weights {w.shape} vs tensor {a.data.shape}")

    def backward(g):
        return (w * float(g),)

    return _result(np.asarray((a.data * w).sum(), dtype=a.data.dtype), "weighted_sum", (a,), backward)


def concat_channels(inputs):
    """Concatenate [N,C,H,W] tensors along the channel axis."""
    base = inputs[0].data
    for t in inputs[1:]:
        if t.data.ndim != base.ndim or t.data.shape[0] != base.shape[0] or t.data.shape[2:] != base.shape[2:]:
            raise DimensionError(
                f"concat_channels: incompatible shapes {base.shape} vs {t.data.shape}"
            )
        if t.data.dtype != base.dtype:
            raise DimensionError("concat_channels: dtype mismatch")
    widths = [t.data.shape[1] for t in inputs]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(
            np.ascontiguousarray(g[:, bounds[i] : bounds[i + 1]])
            for i in range(len(inputs))
        )

    out = np.concatenate([t.data for t in inputs], axis=1)
    return _result(out, "concat_channels", tuple(inputs), backward)


def channel_slice(a, start, stop):
    """View channels [start, stop) of an [N,C,H,W] tensor as a new tensor."""
    if a.data.ndim != 4:
        raise DimensionError("channel_slice expects an [N,C,H,W] tensor")
    c = a.data.shape[1]
    if not (0 <= start < stop <= c):
        raise DimensionError(f"channel_slice: range [{start},{stop}) outside {c} channels")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    out = np.ascontiguousarray(a.data[:, start:stop])
    return _result(out, "channel_slice", (a,), backward)


def channel_transform(a, matrix):
    """Apply a constant matrix across the channel axis of [N,C,H,W].

    out[n, i] = sum_j matrix[i, j] * a[n, j]; used for dense skip mappings.
    """
    m = np.asarray(matrix, dtype=a.data.dtype)
    if a.data.ndim != 4 or m.ndim != 2 or m.shape[1] != a.data.shape[1]:
        raise DimensionError(
            f"channel_transform: matrix {m.shape} does not act on {a.data.shape}"
        )

    def backward(g):
        return (np.einsum("ij,nihw->njhw", m, g),)

    return _result(np.einsum("ij,njhw->nihw", m, a.data), "channel_transform", (a,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _out_extent(extent, k, stride, pad):
    return (extent + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = _out_extent(h, kh, stride, pad)
    ow = _out_extent(w, kw, stride, pad)
    if pad > 0:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    sn, sc, sh, sw = xp.strides
    patches = as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = _out_extent(h, kh, stride, pad)
    ow = _out_extent(w, kw, stride, pad)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[
                :, :, i, j
            ]
    if pad > 0:
        return np.ascontiguousarray(xp[:, :, pad : pad + h, pad : pad + w])
    return xp


def conv2d(x, kernel, stride=1, pad=0):
    """2-d cross-correlation of [N,Cin,H,W] with a [Cout,Cin,kh,kw] kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernel")
    n, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: kernel consumes {kcin} channels, input has {cin}")
    if x.data.dtype != kernel.data.dtype:
        raise DimensionError("conv2d: dtype mismatch between input and kernel")
    if kh < 1 or kw < 1 or stride < 1:
        raise DimensionError("conv2d: kernel extents and stride must be >= 1")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )

    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = kernel.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, oh, ow)

    def backward(g):
        go = g.reshape(n, cout, oh * ow)
        dk = None
        dx = None
        if kernel.requires_grad:
            dk = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.data.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.T, go)
            dx = _col2im(dcols, x.data.shape, kh, kw, stride, pad)
        return dx, dk

    return _result(out, "conv2d", (x, kernel), backward)


def group_conv2d(x, kernels, stride=1, pad=0):
    """Grouped convolution: each kernel consumes its own channel slice.

    Equivalent to a single conv2d with a block-diagonal kernel; outputs are
    concatenated along channels in group order.
    """
    g = len(kernels)
    if g < 1:
        raise DimensionError("group_conv2d needs at least one group")
    c = x.data.shape[1]
    if c % g != 0:
        raise DimensionError(f"group_conv2d: {c} channels not divisible into {g} groups")
    cg = c // g
    outs = []
    for i, k in enumerate(kernels):
        if k.data.shape[1] != cg:
            raise DimensionError(
                f"group_conv2d: group {i} kernel consumes {k.data.shape[1]} channels, expected {cg}"
            )
        part = x if g == 1 else channel_slice(x, i * cg, (i + 1) * cg)
        outs.append(conv2d(part, k, stride, pad))
    if g == 1:
        return outs[0]
    return concat_channels(outs)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNormState:
    """Per-channel running statistics for batch normalization.

    ``momentum`` is the retained fraction of the old running value per
    update. ``update`` can be cleared to freeze the stats (used when a
    forward pass is replayed for NaN diagnosis).
    """

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.update = True


def batch_norm(x, gamma, beta, state, training=False):
    """Per-channel batch normalization over an [N,C,H,W] tensor."""
    if x.data.ndim != 4:
        raise DimensionError("batch_norm expects an [N,C,H,W] tensor")
    n, c, h, w = x.data.shape
    if n * h * w < 1:
        raise DimensionError("batch_norm: empty batch/spatial extent")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"batch_norm: gamma/beta must have shape ({c},), got {gamma.data.shape}/{beta.data.shape}"
        )
    m = n * h * w
    eps = state.eps

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if state.update:
            mom = state.momentum
            state.mean = (mom * state.mean + (1.0 - mom) * mu).astype(state.mean.dtype)
            state.var = (mom * state.var + (1.0 - mom) * var).astype(state.var.dtype)
    else:
        mu = state.mean.astype(x.data.dtype)
        var = state.var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
                dx = (inv[None, :, None, None] / m) * (
                    m * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]
                )
            else:
                dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return _result(out, "batch_norm", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# dense head
# ---------------------------------------------------------------------------


def linear(x, weight, bias):
    """Affine map: [N,D] @ [D,K] + [K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError("linear expects 2-d input and weight")
    n, d = x.data.shape
    dw, k = weight.data.shape
    if dw != d or bias.data.shape != (k,):
        raise DimensionError(
            f"linear: input [N,{d}] incompatible with weight {weight.data.shape} / bias {bias.data.shape}"
        )

    def backward(g):
        dx = g @ weight.data.T if x.requires_grad else None
        dwt = x.data.T @ g if weight.requires_grad else None
        db = g.sum(axis=0) if bias.requires_grad else None
        return dx, dwt, db

    return _result(x.data @ weight.data + bias.data, "linear", (x, weight, bias), backward)


def global_avg_pool(x):
    """Spatial mean of [N,C,H,W] down to [N,C]."""
    if x.data.ndim != 4:
        raise DimensionError("global_avg_pool expects an [N,C,H,W] tensor")
    n, c, h, w = x.data.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,), backward)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax logits.

    Stabilized by max subtraction; gradient is (softmax - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects [N,K] logits")
    n, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: expected {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), "softmax_cross_entropy", (logits,), backward)
