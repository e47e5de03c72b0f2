"""Dense double-precision tensors with analytic backward rules.

Every differentiable operation registers its backward rule in ``BACKWARD``
under the operation's name.  A reverse pass over the recorded operations of
one computation composes those rules; there is no general-purpose tape API.
"""
from __future__ import annotations

import contextlib

import numpy as np

from .errors import ConfigError, EvaluationError, ShapeError

BACKWARD = {}

_grad_enabled = True


def backward_rule(name):
    """Register ``fn(ctx, grad, *parents) -> parent grads`` for op ``name``."""

    def deco(fn):
        BACKWARD[name] = fn
        return fn

    return deco


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A real array plus the bookkeeping needed for reverse-mode gradients.

    Most values in this package are 2-D ``(rows, cols)`` sequence matrices:
    rows index tokens, cols index features.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = None
        self._parents = ()
        self._ctx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs an explicit grad for shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        order = _topo_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._op is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = BACKWARD[node._op](node._ctx, g, *node._parents)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, ctx=None):
    if not np.all(np.isfinite(data)):
        raise EvaluationError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = op
        out._parents = parents
        out._ctx = ctx
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b))


@backward_rule("add")
def _add_bw(ctx, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b))


@backward_rule("sub")
def _sub_bw(ctx, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b))


@backward_rule("mul")
def _mul_bw(ctx, g, a, b):
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, "div", (a, b))


@backward_rule("div")
def _div_bw(ctx, g, a, b):
    ga = g / b.data
    gb = -g * a.data / (b.data * b.data)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,))


@backward_rule("neg")
def _neg_bw(ctx, g, a):
    return (-g,)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), out)


@backward_rule("exp")
def _exp_bw(out, g, a):
    return (g * out,)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise EvaluationError("log of a non-positive value")
    return _make(np.log(a.data), "log", (a,))


@backward_rule("log")
def _log_bw(ctx, g, a):
    return (g / a.data,)


def relu(a):
    a = as_tensor(a)
    return _make(np.maximum(a.data, 0.0), "relu", (a,))


@backward_rule("relu")
def _relu_bw(ctx, g, a):
    return (g * (a.data > 0),)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, "sigmoid", (a,), out)


@backward_rule("sigmoid")
def _sigmoid_bw(out, g, a):
    return (g * out * (1.0 - out),)


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient is zero on (and outside) the bounds."""
    a = as_tensor(a)
    return _make(np.clip(a.data, lo, hi), "clip", (a,), (lo, hi))


@backward_rule("clip")
def _clip_bw(ctx, g, a):
    lo, hi = ctx
    return (g * ((a.data > lo) & (a.data < hi)),)


# ---------------------------------------------------------------- reductions & shape

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), (axis, keepdims))


@backward_rule("sum")
def _sum_bw(ctx, g, a):
    axis, keepdims = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def transpose(a):
    a = as_tensor(a)
    return _make(a.data.T, "transpose", (a,))


@backward_rule("transpose")
def _transpose_bw(ctx, g, a):
    return (g.T,)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), "reshape", (a,))


@backward_rule("reshape")
def _reshape_bw(ctx, g, a):
    return (g.reshape(a.shape),)


def getitem(a, idx):
    a = as_tensor(a)
    return _make(np.array(a.data[idx]), "getitem", (a,), idx)


@backward_rule("getitem")
def _getitem_bw(idx, g, a):
    out = np.zeros_like(a.data)
    np.add.at(out, idx, g)
    return (out,)


def take_rows(a, idx):
    """Gather rows ``a[idx]`` (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    return _make(a.data[idx], "take_rows", (a,), idx)


@backward_rule("take_rows")
def _take_rows_bw(idx, g, a):
    out = np.zeros_like(a.data)
    np.add.at(out, idx, g)
    return (out,)


def stack(tensors):
    tensors = tuple(as_tensor(t) for t in tensors)
    return _make(np.stack([t.data for t in tensors]), "stack", tensors)


@backward_rule("stack")
def _stack_bw(ctx, g, *parents):
    return tuple(g[i] for i in range(len(parents)))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b))


@backward_rule("matmul")
def _matmul_bw(ctx, g, a, b):
    return g @ b.data.T, a.data.T @ g


def inner(a, b):
    """Frobenius inner product <a, b> as a 0-d tensor."""
    return tsum(mul(a, b))


# ---------------------------------------------------------------- attention-related kernels

def softmax_rows(m):
    """Row-wise softmax with max subtraction."""
    m = as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {m.shape}")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return _make(out, "softmax_rows", (m,), out)


@backward_rule("softmax_rows")
def _softmax_bw(s, g, m):
    return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


def layer_norm(x, eps=1e-5):
    """Normalize each row to zero mean and unit variance (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    return _make(xhat, "layer_norm", (x,), (xhat, inv))


@backward_rule("layer_norm")
def _layer_norm_bw(ctx, g, x):
    xhat, inv = ctx
    gm = g.mean(axis=1, keepdims=True)
    gxm = (g * xhat).mean(axis=1, keepdims=True)
    return (inv * (g - gm - xhat * gxm),)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row-softmax of ``logits``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.shape != (logits.rows,):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(targets)), targets].mean()
    return _make(np.asarray(loss), "cross_entropy", (logits,), (np.exp(logp), targets))


@backward_rule("cross_entropy")
def _cross_entropy_bw(ctx, g, logits):
    p, targets = ctx
    d = p.copy()
    d[np.arange(len(targets)), targets] -= 1.0
    return (g * d / len(targets),)


# ---------------------------------------------------------------- 1-D convolution and pooling

def conv1d(x, kernel, stride=1, dilation=1):
    """1-D convolution of a ``(rows, d_in)`` sequence with a ``(k, d_in, d_out)`` kernel.

    Output position ``j`` reads input positions ``j*stride + (t - (k-1)//2) * dilation``
    for taps ``t = 0..k-1``; positions outside the sequence read zero.  With
    ``stride == 1`` the output has ``rows`` positions (symmetric padding);
    otherwise ``rows // stride`` positions, so only left padding is ever read
    when the kernel fits.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be (k, d_in, d_out), got {kernel.shape}")
    k, d_in, _ = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    if int(stride) != stride or stride < 1 or int(dilation) != dilation or dilation < 1:
        raise ConfigError(f"stride and dilation must be positive integers, got {stride}, {dilation}")
    if x.ndim != 2 or x.cols != d_in:
        raise ShapeError(f"conv1d input {x.shape} does not match kernel {kernel.shape}")
    rows = x.rows
    n_out = rows if stride == 1 else rows // stride
    if n_out < 1:
        raise ShapeError(f"conv1d: {rows} rows cannot be strided by {stride}")
    half = (k - 1) // 2 * dilation
    xp = np.pad(x.data, ((half, half), (0, 0)))
    pos = np.arange(n_out) * stride
    taps = [pos + t * dilation for t in range(k)]
    out = np.zeros((n_out, kernel.shape[2]))
    for t in range(k):
        out += xp[taps[t]] @ kernel.data[t]
    return _make(out, "conv1d", (x, kernel), (xp, taps, half))


@backward_rule("conv1d")
def _conv1d_bw(ctx, g, x, kernel):
    xp, taps, half = ctx
    gxp = np.zeros_like(xp)
    gk = np.empty_like(kernel.data)
    for t, idx in enumerate(taps):
        gk[t] = xp[idx].T @ g
        gxp[idx] += g @ kernel.data[t].T
    return gxp[half:half + x.rows], gk


def pool_windows(rows, n_out):
    """Window bounds ``[floor(i*rows/n_out), ceil((i+1)*rows/n_out))`` for each output row."""
    i = np.arange(n_out)
    starts = (i * rows) // n_out
    ends = -((-(i + 1) * rows) // n_out)
    return starts, ends


def adaptive_max_pool(x, n_out):
    """Column-wise max over adaptive windows that jointly cover every input row."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"adaptive_max_pool expects a matrix, got {x.shape}")
    if int(n_out) != n_out or n_out < 1 or n_out > x.rows:
        raise ShapeError(f"adaptive_max_pool: cannot pool {x.rows} rows to {n_out}")
    starts, ends = pool_windows(x.rows, int(n_out))
    width = int((ends - starts).max())
    idx = np.minimum(starts[:, None] + np.arange(width)[None, :], ends[:, None] - 1)
    windows = x.data[idx]  # (n_out, width, cols)
    arg = windows.argmax(axis=1)
    src = np.take_along_axis(idx, arg, axis=1)  # (n_out, cols) source rows
    cols = np.broadcast_to(np.arange(x.cols), src.shape)
    out = x.data[src, cols]
    return _make(out, "adaptive_max_pool", (x,), (src, cols))


@backward_rule("adaptive_max_pool")
def _adaptive_max_pool_bw(ctx, g, x):
    src, cols = ctx
    out = np.zeros_like(x.data)
    np.add.at(out, (src, cols), g)
    return (out,)
