"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Design constraints, in order of importance: determinism (same inputs and
parameters give bitwise-identical forwards and gradients), correctness
verifiable by central finite differences, and exact straight-through /
stop-gradient semantics at quantization sites. float32 is the training
precision; tests rebuild graphs in float64 for gradient checks.

The graph is define-by-run: every op returns a new ``Tensor`` holding its
parents and a backward closure. ``backward(loss)`` walks the tape once in
reverse topological order.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operands do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward invoked on an invalid target (non-scalar, no forward)."""


class no_grad:
    """Context manager disabling tape recording (inference fast path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g.flags.writeable is False else g
        else:
            self.grad = self.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def constant(data, dtype=None):
    """A leaf tensor that never receives gradient (stop-gradient literal)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _check_finite(arr, op_name):
    # single-pass screen; the sum is non-finite iff some element is (or the
    # magnitudes already overflow, which is equally an error state here)
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values produced by op '{op_name}'")


def _node(data, parents, backward_fn, op_name):
    _check_finite(data, op_name)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward, "add")


def sub(a, b):
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward, "sub")


def mul(a, b):
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward, "mul")


def neg(a):
    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _node(-a.data, (a,), backward, "neg")


def square(a):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (2.0 * a.data))

    return _node(a.data * a.data, (a,), backward, "square")


def absolute(a):
    # subgradient 0 at exactly 0
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), backward, "abs")


def gelu(a):
    """GELU with the tanh approximation (analytic derivative)."""
    c = math.sqrt(2.0 / math.pi)
    x = a.data
    x2 = x * x
    inner = c * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = c * (1.0 + (3 * 0.044715) * x2)
            grad = 0.5 * (1.0 + t) + (0.5 * x) * ((1.0 - t * t) * dinner)
            a._accumulate(g * grad.astype(x.dtype))

    return _node(data, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# matmul / linear
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # flatten batch dims: one GEMM instead of a batched loop
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            a._accumulate(ga)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accumulate(gb)

    return _node(data, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """x @ weight + bias with weight (d_in, d_out); x may carry batch dims."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {weight.shape}")
    y = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear bias: {bias.shape} vs ({weight.shape[1]},)")
        y = add(y, bias)
    return y


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: {a.shape} -> {shape}")
    old_shape = a.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old_shape))

    return _node(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), backward, "transpose")


def concat(tensors, axis=-1):
    if not tensors:
        raise ShapeError("concat: empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _node(data, tuple(tensors), backward, "concat")


def take(a, indices, axis=0):
    """Select rows along `axis` by an integer index array (gather)."""
    indices = np.asarray(indices)
    data = np.take(a.data, indices, axis=axis)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            # move target axis first for scatter-add
            ga_m = np.moveaxis(ga, axis, 0)
            g_m = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)),
                              tuple(range(indices.ndim)))
            np.add.at(ga_m, indices, g_m)
            a._accumulate(ga)

    return _node(data, (a,), backward, "take")


def gather_rows(x, idx):
    """Per-batch row gather: out[b, j] = x[b, idx[b, j]] for x (B, N, d)."""
    if x.ndim != 3 or idx.ndim != 2:
        raise ShapeError(f"gather_rows: x {x.shape}, idx {idx.shape}")
    idx = np.asarray(idx)
    batch = np.arange(x.shape[0])[:, None]
    data = x.data[batch, idx]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (batch, idx), g)
            x._accumulate(gx)

    return _node(data, (x,), backward, "gather_rows")


# ---------------------------------------------------------------------------
# reductions / normalizations
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).astype(a.data.dtype))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.shape).astype(a.data.dtype))

    return _node(data, (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if a.requires_grad:
            scale = np.asarray(1.0 / count, dtype=a.data.dtype)
            if axis is None:
                a._accumulate(np.broadcast_to(g * scale, a.shape).astype(a.data.dtype))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg * scale, a.shape).astype(a.data.dtype))

    return _node(data, (a,), backward, "mean")


def softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate((y * (g - dot)).astype(x.dtype))

    return _node(y, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    y = np.exp(data)

    def backward(g):
        if a.requires_grad:
            a._accumulate((g - y * g.sum(axis=axis, keepdims=True)).astype(x.dtype))

    return _node(data, (a,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Layer normalization over the last axis."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params: {gain.shape}, {bias.shape} vs ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gain.data * xhat + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gain.data
            term1 = gx_hat
            term2 = gx_hat.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(((term1 - term2 - term3) * inv).astype(x.data.dtype))

    return _node(data, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# gradient-flow control
# ---------------------------------------------------------------------------

def stop_gradient(a):
    """Treat `a` as a constant: forward passes data, backward emits zero."""
    return Tensor(a.data, requires_grad=False)


def straight_through(pre, quantized_data):
    """Forward the quantized values; copy the upstream gradient to `pre` bitwise."""
    quantized_data = np.asarray(quantized_data, dtype=pre.data.dtype)
    if quantized_data.shape != pre.shape:
        raise ShapeError(f"straight_through: {quantized_data.shape} vs {pre.shape}")

    def backward(g):
        if pre.requires_grad:
            pre._accumulate(g)

    return _node(quantized_data, (pre,), backward, "straight_through")


# ---------------------------------------------------------------------------
# backward pass / verification
# ---------------------------------------------------------------------------

def backward(loss):
    """Reverse-mode sweep from a scalar loss; populates .grad on reachable leaves."""
    if not isinstance(loss, Tensor):
        raise GraphError("backward target must be a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any trainable tensor "
                         "(was forward run with gradients enabled?)")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def finite_difference_check(build_loss, params, eps=1e-5, rng=None, max_entries=50):
    """Max relative error between analytic and central-difference gradients.

    `build_loss` re-runs the forward pass and returns the scalar loss tensor;
    `params` is a dict of leaf tensors. Entries are sampled (up to
    `max_entries` total) when the parameter count is large. The check is
    meaningful only when parameters hold float64 data.
    """
    if not (0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    for p in params.values():
        p.grad = None
    loss = build_loss()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    entries = [(k, i) for k, p in params.items() for i in range(p.data.size)]
    if rng is not None and len(entries) > max_entries:
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    max_err = 0.0
    for key, i in entries:
        p = params[key]
        orig = p.data.flat[i]
        p.data.flat[i] = orig + eps
        lp = build_loss().item()
        p.data.flat[i] = orig - eps
        lm = build_loss().item()
        p.data.flat[i] = orig
        fd = (lp - lm) / (2.0 * eps)
        err = abs(float(analytic[key].flat[i]) - fd) / max(1.0, abs(fd))
        max_err = max(max_err, err)
    return max_err
