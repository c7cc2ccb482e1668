"""Reverse-mode autodiff on numpy arrays, sized for small 1D signal models.

Every op that sees a tracked input returns a Tensor carrying its parents and
a closure mapping the output gradient to parent gradients.  backward() walks
the tape iteratively in reverse topological order, so deep recurrent unrolls
never touch Python's recursion limit.

Training runs in 32-bit floats; the gradient-check suite feeds 64-bit arrays
and every op preserves the input dtype.
"""

from __future__ import annotations

import threading
import warnings
from contextlib import contextmanager

import numpy as np

from .errors import ShapeError, UsageError

# per-thread so concurrent training loops cannot untape each other
_tape_state = threading.local()


def _grad_enabled():
    return getattr(_tape_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable taping inside the block; forward values are unaffected."""
    prev = _grad_enabled()
    _tape_state.enabled = False
    try:
        yield
    finally:
        _tape_state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name",
                 "_parents", "_backward", "_hooks")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._hooks = []

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def register_hook(self, fn):
        """Call fn(grad) once per backward pass that reaches this tensor."""
        self._hooks.append(fn)
        return fn

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self._backward is None and not self.requires_grad:
            raise UsageError(
                "backward called on a tensor produced outside any taped "
                "computation")
        if self.data.size != 1:
            raise UsageError(
                f"backward needs a scalar loss, got shape {self.data.shape}")
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
            if node.grad is None:
                continue
            for hook in node._hooks:
                hook(node.grad)
            if node._backward is not None:
                node._backward(node.grad)

    # arithmetic sugar; heavy ops stay module-level functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, like=self), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return _reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _reduce(self, "mean", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _tracked(t):
    return t.requires_grad or t._parents or t._hooks


def _node(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled() and any(_tracked(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not _tracked(t):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise and linear primitives --------------------------------------

def add(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), backward)


def neg(a):
    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward)


def mul(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    ad, bd = a.data, b.data

    def backward(g):
        _accum(a, _unbroadcast(g * bd, ad.shape))
        _accum(b, _unbroadcast(g * ad, bd.shape))

    return _node(ad * bd, (a, b), backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        _accum(a, g @ bd.T)
        _accum(b, ad.T @ g)

    return _node(ad @ bd, (a, b), backward)


def log(a):
    ad = a.data

    def backward(g):
        _accum(a, g / ad)

    return _node(np.log(ad), (a,), backward)


def pow_const(a, exponent):
    e = float(exponent)
    ad = a.data

    def backward(g):
        _accum(a, g * e * ad ** (e - 1.0))

    return _node(ad ** e, (a,), backward)


def clamp_min(a, floor):
    mask = a.data >= floor

    def backward(g):
        _accum(a, g * mask)

    return _node(np.maximum(a.data, floor), (a,), backward)


def _reduce(a, kind, axis, keepdims):
    if kind == "sum":
        data = a.data.sum(axis=axis, keepdims=keepdims)
    else:
        data = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / data.size if kind == "mean" else 1.0

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        gg = np.broadcast_to(gg, a.data.shape)
        _accum(a, gg / scale if kind == "mean" else gg)

    return _node(data, (a,), backward)


def reshape(a, shape):
    old = a.data.shape

    def backward(g):
        _accum(a, g.reshape(old))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


def narrow(a, axis, start, length):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[idx] = g
        _accum(a, gx)

    return _node(a.data[idx], (a,), backward)


def gather_rows(a, indices):
    """out[i] = a[i, indices[i]] for a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects 2-D input, got {a.data.shape}")
    indices = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.data.shape[0])

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[rows, indices] = g
        _accum(a, gx)

    return _node(a.data[rows, indices], (a,), backward)


def dropout(x, p, training, rng):
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward(g):
        _accum(x, g * mask)

    return _node(x.data * mask, (x,), backward)


# -- activations -------------------------------------------------------------

def _sigmoid_values(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    y = _sigmoid_values(a.data)

    def backward(g):
        _accum(a, g * y * (1.0 - y))

    return _node(y, (a,), backward)


def tanh(a):
    y = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - y * y))

    return _node(y, (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def leaky_relu(a, slope=0.2):
    mask = a.data > 0

    def backward(g):
        _accum(a, g * np.where(mask, 1.0, slope))

    return _node(np.where(mask, a.data, slope * a.data), (a,), backward)


def swish(a):
    s = _sigmoid_values(a.data)
    ad = a.data

    def backward(g):
        _accum(a, g * (s + ad * s * (1.0 - s)))

    return _node(ad * s, (a,), backward)


ACTIVATIONS = {
    "swish": swish,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
}


def activation(kind, a):
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise UsageError(f"unknown activation {kind!r}; "
                         f"known: {sorted(ACTIVATIONS)}") from None
    return fn(a)


def softmax(a, axis=-1):
    # row-max subtraction keeps exp() in range on large logits
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _node(y, (a,), backward)


# -- layers ------------------------------------------------------------------

def dense(x, weight, bias=None):
    """Affine map x @ W.T + b for x[batch, d_in], W[d_out, d_in]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weight, got "
                         f"{x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"dense input width {x.data.shape[1]} != "
                         f"weight fan-in {weight.data.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        _accum(x, g @ wd)
        _accum(weight, g.T @ xd)
        if bias is not None:
            _accum(bias, g.sum(axis=0))

    return _node(out, tuple(parents), backward)


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of x[b, c_in, len] with weight[c_out, c_in, k]."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv1d input must be [batch, ch, len], "
                         f"got {x.data.shape}")
    if weight.data.ndim != 3:
        raise ShapeError(f"conv1d weight must be [out, in, k], "
                         f"got {weight.data.shape}")
    batch, c_in, length = x.data.shape
    c_out, c_w, k = weight.data.shape
    if c_w != c_in:
        raise ShapeError(f"conv1d channel mismatch: input has {c_in}, "
                         f"weight expects {c_w}")
    if stride < 1:
        raise ShapeError(f"conv1d stride must be >= 1, got {stride}")
    padded_len = length + 2 * padding
    if not 1 <= k <= padded_len:
        raise ShapeError(f"kernel size {k} exceeds padded length {padded_len}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding \
        else x.data
    out_len = (padded_len - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    windows = windows[:, :, ::stride]                       # [b,ci,lo,k]
    cols = windows.transpose(0, 2, 1, 3).reshape(batch * out_len, c_in * k)
    wmat = weight.data.reshape(c_out, c_in * k)
    out = (cols @ wmat.T).reshape(batch, out_len, c_out).transpose(0, 2, 1)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1)
        parents.append(bias)

    def backward(g):
        gmat = g.transpose(0, 2, 1).reshape(batch * out_len, c_out)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2)))
        _accum(weight, (gmat.T @ cols).reshape(c_out, c_in, k))
        if _tracked(x):
            gcols = (gmat @ wmat).reshape(batch, out_len, c_in, k)
            gcols = gcols.transpose(0, 2, 1, 3)
            gxp = np.zeros((batch, c_in, padded_len), dtype=g.dtype)
            span = (out_len - 1) * stride + 1
            for j in range(k):
                gxp[:, :, j:j + span:stride] += gcols[:, :, :, j]
            _accum(x, gxp[:, :, padding:padding + length] if padding else gxp)

    return _node(out, tuple(parents), backward)


class RunningStats:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm1d(x, gamma, beta, stats, training, momentum=0.1, eps=1e-5):
    """Normalize per channel over batch (and time for 3-D input).

    Train mode normalizes by batch statistics (biased variance) and folds
    an unbiased variance estimate into the running buffers; eval mode uses
    the buffers.
    """
    nd = x.data.ndim
    if nd not in (2, 3):
        raise ShapeError(f"batch_norm1d expects 2-D or 3-D input, "
                         f"got {x.data.shape}")
    channels = x.data.shape[1]
    if gamma.data.shape != (channels,) or beta.data.shape != (channels,):
        raise ShapeError(f"norm parameters must have shape ({channels},)")
    bshape = (1, channels) if nd == 2 else (1, channels, 1)
    axes = (0,) if nd == 2 else (0, 2)
    if training:
        n = x.data.shape[0] * (1 if nd == 2 else x.data.shape[2])
        if n == 1:
            warnings.warn(
                "batch normalization saw one value per channel; statistics "
                "are degenerate and only the eps guard keeps them finite",
                RuntimeWarning)
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean[...] = (1.0 - momentum) * stats.mean + momentum * mean
        unbiased = var * (n / (n - 1)) if n > 1 else var
        stats.var[...] = (1.0 - momentum) * stats.var + momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
    else:
        n = 0
        mean = stats.mean
        inv = 1.0 / np.sqrt(stats.var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    gd = gamma.data

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        if _tracked(x):
            gxh = g * gd.reshape(bshape)
            if training:
                correction = gxh.sum(axis=axes, keepdims=True) / n
                projection = xhat * (gxh * xhat).sum(axis=axes,
                                                     keepdims=True) / n
                gx = (gxh - correction - projection) * inv.reshape(bshape)
            else:
                gx = gxh * inv.reshape(bshape)
            _accum(x, gx)

    return _node(out, (x, gamma, beta), backward)


def max_pool1d(x, kernel, stride=None):
    """Windowed maximum over time; argmax positions route the gradient."""
    if x.data.ndim != 3:
        raise ShapeError(f"max_pool1d expects [batch, ch, len], "
                         f"got {x.data.shape}")
    if stride is None:
        stride = kernel
    batch, channels, length = x.data.shape
    if not 1 <= kernel <= length:
        raise ShapeError(f"pool kernel {kernel} exceeds length {length}")
    out_len = (length - kernel) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=2)
    windows = windows[:, :, ::stride]
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        pos = np.arange(out_len).reshape(1, 1, out_len) * stride + arg
        bi = np.broadcast_to(np.arange(batch).reshape(batch, 1, 1), pos.shape)
        ci = np.broadcast_to(np.arange(channels).reshape(1, channels, 1),
                             pos.shape)
        np.add.at(gx, (bi, ci, pos), g)
        _accum(x, gx)

    return _node(out, (x,), backward)


def adaptive_pool1d(x, out_len, mode="avg"):
    """Reduce time into out_len bins [floor(i*len/out), floor((i+1)*len/out))."""
    if x.data.ndim != 3:
        raise ShapeError(f"adaptive_pool1d expects [batch, ch, len], "
                         f"got {x.data.shape}")
    if mode not in ("avg", "max"):
        raise UsageError(f"adaptive pool mode must be avg or max, got {mode!r}")
    batch, channels, length = x.data.shape
    if not 1 <= out_len <= length:
        raise ShapeError(f"adaptive out_len {out_len} must lie in "
                         f"[1, {length}]")
    bounds = [(i * length // out_len, (i + 1) * length // out_len)
              for i in range(out_len)]
    out = np.empty((batch, channels, out_len), dtype=x.data.dtype)
    args = []
    for i, (lo, hi) in enumerate(bounds):
        segment = x.data[:, :, lo:hi]
        if mode == "avg":
            out[:, :, i] = segment.mean(axis=-1)
        else:
            arg = segment.argmax(axis=-1)
            args.append(arg)
            out[:, :, i] = np.take_along_axis(segment, arg[..., None],
                                              axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        bi = np.arange(batch).reshape(batch, 1)
        ci = np.arange(channels).reshape(1, channels)
        for i, (lo, hi) in enumerate(bounds):
            if mode == "avg":
                gx[:, :, lo:hi] += g[:, :, i:i + 1] / (hi - lo)
            else:
                gx[bi, ci, lo + args[i]] += g[:, :, i]
        _accum(x, gx)

    return _node(out, (x,), backward)


# -- recurrent and attention layers ------------------------------------------

def lstm_step(x_t, h_prev, c_prev, w_ih, w_hh, b):
    """One LSTM cell step; gate layout (input, forget, cell, output)."""
    hidden = h_prev.data.shape[1]
    z = add(dense(x_t, w_ih, b), dense(h_prev, w_hh, None))
    i = sigmoid(narrow(z, 1, 0, hidden))
    f = sigmoid(narrow(z, 1, hidden, hidden))
    g = tanh(narrow(z, 1, 2 * hidden, hidden))
    o = sigmoid(narrow(z, 1, 3 * hidden, hidden))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def _lstm_direction(steps, params, batch, hidden, dtype):
    h = Tensor(np.zeros((batch, hidden), dtype=dtype))
    c = Tensor(np.zeros((batch, hidden), dtype=dtype))
    outputs = []
    for x_t in steps:
        h, c = lstm_step(x_t, h, c, params["w_ih"], params["w_hh"],
                         params["b"])
        outputs.append(h)
    return outputs


def bilstm(x, layer_params, hidden, dropout_rate=0.0, training=False,
           rng=None):
    """Stacked bidirectional LSTM over x[batch, time, features].

    layer_params is a list of {"fwd": gates, "bwd": gates} dicts, one per
    layer, each gate set holding w_ih [4h, d], w_hh [4h, h] and b [4h].
    Dropout applies between layers only, in train mode.
    """
    batch, length, _ = x.data.shape
    if length < 1:
        raise ShapeError("bilstm needs at least one time step")
    current = x
    for depth, params in enumerate(layer_params):
        if depth > 0 and dropout_rate > 0.0:
            current = dropout(current, dropout_rate, training, rng)
        feat = current.data.shape[2]
        steps = [reshape(narrow(current, 1, t, 1), (batch, feat))
                 for t in range(length)]
        fwd = _lstm_direction(steps, params["fwd"], batch, hidden,
                              x.data.dtype)
        bwd = _lstm_direction(steps[::-1], params["bwd"], batch, hidden,
                              x.data.dtype)
        bwd = bwd[::-1]
        fwd_seq = concat([reshape(h, (batch, 1, hidden)) for h in fwd], 1)
        bwd_seq = concat([reshape(h, (batch, 1, hidden)) for h in bwd], 1)
        current = concat([fwd_seq, bwd_seq], 2)
    return current


def attention_pool(h, w_h, b_h, v):
    """Additive attention over time.

    Scores are v . tanh(W_h h_t + b_h), softmax-normalized over time; the
    pooled context is the score-weighted sum of hidden states.  Returns
    (context [batch, d], weights [batch, time]).
    """
    batch, length, dim = h.data.shape
    flat = reshape(h, (batch * length, dim))
    u = tanh(dense(flat, w_h, b_h))
    scores = matmul(u, reshape(v, (v.data.shape[0], 1)))
    alpha = softmax(reshape(scores, (batch, length)), axis=1)
    weighted = mul(h, reshape(alpha, (batch, length, 1)))
    context = weighted.sum(axis=1)
    return context, alpha
