"""Dense-array math with reverse-mode automatic differentiation.

A Tensor wraps a float numpy array and, while gradients are enabled, records
the operation that produced it. backward() walks the recorded graph in
reverse topological order and accumulates partials into .grad. float64 is
the default and the precision every verification suite runs in; float32 is
accepted for training throughput.

Shapes follow numpy broadcasting; gradients of broadcast operands are summed
back to the operand shape.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (forward-only evals)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return np.asarray(arr, dtype=dtype)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backprop = None

    # -- basic introspection ------------------------------------------------

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

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(node) into .grad for every upstream node.

        self must be scalar-shaped. Iterative topological order: graphs here
        routinely chain thousands of ops (LSTM/SSM scans), which would blow
        the recursion limit.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NumericError("backward() called on a non-finite value")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)


def _wrap(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backprop):
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def _unbroadcast(g, shape):
    """Sum gradient g back to an operand's pre-broadcast shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b, a)
    data = a.data + b.data

    def backprop(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backprop)


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    data = a.data * b.data

    def backprop(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backprop)


def div(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    data = a.data / b.data

    def backprop(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backprop)


def power(a, exponent):
    a = _wrap(a)
    exponent = float(exponent)
    data = a.data ** exponent

    def backprop(g):
        _accum(a, g * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backprop)


# -- elementwise nonlinearities -----------------------------------------------


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)

    def backprop(g):
        _accum(a, g * out)

    return _make(out, (a,), backprop)


def log(a):
    a = _wrap(a)
    data = np.log(a.data)

    def backprop(g):
        _accum(a, g / a.data)

    return _make(data, (a,), backprop)


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)

    def backprop(g):
        _accum(a, g / (2.0 * out))

    return _make(out, (a,), backprop)


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)

    def backprop(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), backprop)


def _sigmoid_raw(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _wrap(a)
    out = _sigmoid_raw(a.data)

    def backprop(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), backprop)


def relu(a):
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def backprop(g):
        _accum(a, g * (a.data > 0))

    return _make(data, (a,), backprop)


def silu(a):
    a = _wrap(a)
    s = _sigmoid_raw(a.data)
    data = a.data * s

    def backprop(g):
        _accum(a, g * (s + a.data * s * (1.0 - s)))

    return _make(data, (a,), backprop)


def softplus(a):
    a = _wrap(a)
    data = np.logaddexp(0.0, a.data)

    def backprop(g):
        _accum(a, g * _sigmoid_raw(a.data))

    return _make(data, (a,), backprop)


def clamp_min(a, floor):
    """max(a, floor) with gradient passed only where a > floor."""
    a = _wrap(a)
    floor = float(floor)
    data = np.maximum(a.data, floor)

    def backprop(g):
        _accum(a, g * (a.data > floor))

    return _make(data, (a,), backprop)


# -- linear algebra -----------------------------------------------------------


def _swap_last(m):
    return np.swapaxes(m, -1, -2)


def matmul(a, b):
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}") from err

    def backprop(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, _swap_last(b.data)), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(_swap_last(a.data), g), b.data.shape))

    return _make(data, (a, b), backprop)


# -- reductions ---------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backprop(g):
        _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims))

    return _make(data, (a,), backprop)


def reduce_mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)

    def backprop(g):
        _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims) / count)

    return _make(data, (a,), backprop)


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction; gradient flows to the first maximal element."""
    a = _wrap(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def backprop(g):
        if axis is None:
            gx = np.zeros_like(a.data)
            flat_idx = int(np.argmax(a.data))
            gx.reshape(-1)[flat_idx] = g.reshape(())
            _accum(a, gx)
            return
        ax = axis % a.data.ndim
        idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
        gk = g if keepdims else np.expand_dims(g, ax)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, idx, gk, axis=ax)
        _accum(a, gx)

    return _make(data, (a,), backprop)


# -- softmax family -----------------------------------------------------------


def softmax(a, axis=-1):
    """Numerically stable softmax along axis (max-subtraction)."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backprop(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - inner))

    return _make(out, (a,), backprop)


def log_softmax(a, axis=-1):
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backprop(g):
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), backprop)


# -- shape manipulation ---------------------------------------------------------


def reshape(a, shape):
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backprop(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), backprop)


def transpose(a, axes=None):
    a = _wrap(a)
    data = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backprop(g):
        _accum(a, np.transpose(g, inverse))

    return _make(data, (a,), backprop)


def flip(a, axis):
    a = _wrap(a)
    data = np.flip(a.data, axis=axis)

    def backprop(g):
        _accum(a, np.flip(g, axis=axis))

    return _make(data, (a,), backprop)


def take(a, key):
    """Indexing/slicing; duplicate indices accumulate gradient (add.at)."""
    a = _wrap(a)
    data = a.data[key]

    def backprop(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, key, g)
        _accum(a, gx)

    return _make(data, (a,), backprop)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backprop(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(data, tuple(tensors), backprop)


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backprop(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), backprop)


# -- graph/segment primitives ---------------------------------------------------


def segment_sum(a, segment_ids, num_segments):
    """Sum rows of a into num_segments buckets given per-row segment ids."""
    a = _wrap(a)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((num_segments,) + a.data.shape[1:], dtype=a.data.dtype)
    np.add.at(out, segment_ids, a.data)

    def backprop(g):
        _accum(a, g[segment_ids])

    return _make(out, (a,), backprop)


# -- normalization ----------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Zero-mean/unit-variance over the last axis, then affine."""
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = add(x, mul(mu, -1.0))
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gamma), beta)


class RunningStats:
    """Mutable running mean/variance buffers for batch normalization."""

    def __init__(self, dim, dtype=np.float64):
        self.mean = np.zeros(dim, dtype=dtype)
        self.var = np.ones(dim, dtype=dtype)

    def update(self, batch_mean, batch_var, momentum):
        self.mean = (1.0 - momentum) * self.mean + momentum * batch_mean
        self.var = (1.0 - momentum) * self.var + momentum * batch_var


def batch_norm(x, gamma, beta, stats, training, eps=1e-5, momentum=0.1,
               row_weights=None, update_running=None):
    """Batch normalization over rows of x: NDArray[B, d].

    training mode normalizes with (optionally row-weighted) batch statistics
    and updates the running estimates; eval mode uses the running estimates.
    row_weights lets callers exclude padded rows from the statistics.
    """
    if training:
        if row_weights is None:
            mu = reduce_mean(x, axis=0)
            centered = add(x, mul(mu, -1.0))
            var = reduce_mean(mul(centered, centered), axis=0)
        else:
            w = np.asarray(row_weights, dtype=x.data.dtype).reshape(-1, 1)
            w = w / w.sum()
            mu = reduce_sum(mul(x, w), axis=0)
            centered = add(x, mul(mu, -1.0))
            var = reduce_sum(mul(mul(centered, centered), w), axis=0)
        if update_running is None or update_running:
            stats.update(mu.data, var.data, momentum)
        normed = div(centered, sqrt(add(var, eps)))
    else:
        centered = add(x, -stats.mean)
        normed = div(centered, np.sqrt(stats.var + eps))
    return add(mul(normed, gamma), beta)


# -- recurrent cells ----------------------------------------------------------


def lstm_forward(x, layers):
    """Stacked LSTM over x: NDArray[B, L, C_in] with zero initial state.

    layers is a sequence of (W_ih [in, 4h], W_hh [h, 4h], b [4h]) tuples;
    gate order is input, forget, candidate, output. Returns the last layer's
    per-position hidden states [B, L, h] and its final hidden state [B, h].
    """
    if x.shape[1] == 0:
        raise ShapeError("lstm_forward: empty sequence (L == 0)")
    batch = x.shape[0]
    seq = [take(x, (slice(None), t)) for t in range(x.shape[1])]
    for W_ih, W_hh, b in layers:
        hidden = W_hh.shape[0]
        h = Tensor(np.zeros((batch, hidden), dtype=x.data.dtype))
        c = Tensor(np.zeros((batch, hidden), dtype=x.data.dtype))
        outs = []
        for step in seq:
            z = add(add(matmul(step, W_ih), matmul(h, W_hh)), b)
            i_gate = sigmoid(take(z, (slice(None), slice(0, hidden))))
            f_gate = sigmoid(take(z, (slice(None), slice(hidden, 2 * hidden))))
            g_gate = tanh(take(z, (slice(None), slice(2 * hidden, 3 * hidden))))
            o_gate = sigmoid(take(z, (slice(None), slice(3 * hidden, 4 * hidden))))
            c = add(mul(f_gate, c), mul(i_gate, g_gate))
            h = mul(o_gate, tanh(c))
            outs.append(h)
        seq = outs
    outputs = stack(seq, axis=1)
    return outputs, seq[-1]


def dropout(x, rate, rng):
    """Inverted dropout with an explicit generator; rate 0 is the identity."""
    if rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, mask)
