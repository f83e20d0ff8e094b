"""Reverse-mode automatic differentiation over NumPy arrays.

Tensors form a DAG as ops execute; ``grad`` walks it backwards. Every
backward rule is itself written with differentiable ops, so calling
``grad(..., create_graph=True)`` records the backward pass onto the graph
and second-order gradients (needed for the gradient-penalty term) fall out
of a second ``grad`` call.

Only the op set required by the convolutional generator/critic pair and
their losses is provided; this is not a general-purpose engine.
"""

from contextlib import contextmanager

import numpy as np

from . import _kernels
from .errors import ConfigError, GraphError, ShapeError, StateError

_grad_enabled = True
_node_counter = 0


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def _grad_mode(enabled):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array, optionally participating in the autodiff graph.

    ``_parents``/``_vjp`` are only populated while grad recording is
    enabled and some input requires grad; node ids increase monotonically
    with creation order, so descending id is a valid reverse-topological
    order (every op's inputs are created before its output).
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op", "_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        global _node_counter
        self.data = np.asarray(data, dtype=dtype)
        if requires_grad and self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        _node_counter += 1
        self._id = _node_counter

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._bad_item()

    def _bad_item(self):
        raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")

    def detach(self):
        return Tensor(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def astensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None and np.isscalar(value) else None
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, op, parents, vjp):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _sum_to(t, shape):
    """Reduce ``t`` back to ``shape`` by summing broadcast axes."""
    if t.shape == tuple(shape):
        return t
    extra = t.ndim - len(shape)
    if extra:
        t = tsum(t, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and t.shape[i] != 1)
    if axes:
        t = tsum(t, axis=axes, keepdims=True)
    return reshape(t, shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = astensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = astensor(a, like=b)
    return astensor(a), astensor(b)


def add(a, b):
    a, b = _coerce_pair(a, b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))


def sub(a, b):
    a, b = _coerce_pair(a, b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)))


def mul(a, b):
    a, b = _coerce_pair(a, b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)))


def div(a, b):
    a, b = _coerce_pair(a, b)
    return _make(a.data / b.data, "div", (a, b),
                 lambda g: (_sum_to(div(g, b), a.shape),
                            _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)))


def neg(a):
    a = astensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (neg(g),))


def power(a, p):
    a = astensor(a)
    p = float(p)
    return _make(a.data ** p, "pow", (a,),
                 lambda g: (mul(g, mul(p, power(a, p - 1.0))),))


def sqrt(a):
    a = astensor(a)
    out = _make(np.sqrt(a.data), "sqrt", (a,), None)
    out._vjp = lambda g: (div(mul(g, 0.5), out),)
    return out


def exp(a):
    a = astensor(a)
    out = _make(np.exp(a.data), "exp", (a,), None)
    out._vjp = lambda g: (mul(g, out),)
    return out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a):
    a = astensor(a)
    mask = (a.data > 0).astype(a.data.dtype)
    return _make(a.data * mask, "relu", (a,), lambda g: (mul(g, Tensor(mask)),))


def leaky_relu(a, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in (0, 1), got {slope}")
    a = astensor(a)
    scale = np.where(a.data > 0, a.data.dtype.type(1), a.data.dtype.type(slope))
    return _make(a.data * scale, "leaky_relu", (a,), lambda g: (mul(g, Tensor(scale)),))


def tanh(a):
    a = astensor(a)
    out = _make(np.tanh(a.data), "tanh", (a,), None)
    out._vjp = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def activation(a, kind, slope=0.2):
    """Dispatch by name: 'relu', 'leaky_relu', or 'tanh'."""
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "tanh":
        return tanh(a)
    raise ConfigError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = astensor(a)
    shape = tuple(shape)
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (reshape(g, a.shape),))


def transpose_last(a):
    """Swap the last two axes."""
    a = astensor(a)
    return _make(np.swapaxes(a.data, -1, -2), "transpose_last", (a,),
                 lambda g: (transpose_last(g),))


def broadcast_to(a, shape):
    a = astensor(a)
    shape = tuple(shape)
    return _make(np.broadcast_to(a.data, shape).copy(), "broadcast", (a,),
                 lambda g: (_sum_to(g, a.shape),))


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    in_shape = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)

    def vjp(g):
        if not keepdims:
            kd = tuple(1 if i in axes else n for i, n in enumerate(in_shape))
            g = reshape(g, kd)
        return (broadcast_to(g, in_shape),)

    return _make(a.data.sum(axis=axes if axis is not None else None, keepdims=keepdims),
                 "sum", (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis % a.ndim]
    else:
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data @ b.data

    def vjp(g):
        ga = matmul(g, transpose_last(b)) if b.ndim > 1 else mul(g, b)  # b 1-D unused here
        gb = matmul(transpose_last(a), g)
        return (_sum_to(ga, a.shape), _sum_to(gb, b.shape))

    return _make(out_data, "matmul", (a, b), vjp)


# ---------------------------------------------------------------------------
# convolution via patch extraction (the compiled kernels do the data movement,
# BLAS does the arithmetic; both directions stay differentiable to any order
# because im2col/col2im are mutually adjoint linear maps)
# ---------------------------------------------------------------------------

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def im2col_op(x, kh, kw, sh, sw, ph, pw):
    x = astensor(x)
    n, c, h, w = x.shape
    return _make(_kernels.im2col(x.data, kh, kw, sh, sw, ph, pw), "im2col", (x,),
                 lambda g: (col2im_op(g, n, c, h, w, kh, kw, sh, sw, ph, pw),))


def col2im_op(cols, n, c, h, w, kh, kw, sh, sw, ph, pw):
    cols = astensor(cols)
    return _make(_kernels.col2im(cols.data, n, c, h, w, kh, kw, sh, sw, ph, pw),
                 "col2im", (cols,),
                 lambda g: (im2col_op(g, kh, kw, sh, sw, ph, pw),))


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of (N,C,H,W) with (F,C,kh,kw); twice differentiable."""
    x, kernel = astensor(x), astensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ConfigError(f"stride must be >= 1, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ConfigError(f"padding must be >= 0, got {(ph, pw)}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1 or kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(
            f"non-positive conv output extent for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {(sh, sw)}, padding {(ph, pw)}")
    cols = im2col_op(x, kh, kw, sh, sw, ph, pw)
    wmat = reshape(kernel, (f, c * kh * kw))
    out = matmul(wmat, cols)
    return reshape(out, (n, f, oh, ow))


def conv_transpose2d(x, kernel, stride=1, padding=0):
    """Adjoint of conv2d with the same (kernel, stride, padding).

    Input (N,F,h,w) and kernel (F,C,kh,kw) produce (N,C,H,W) with
    H = (h-1)*sh - 2*ph + kh.
    """
    x, kernel = astensor(x), astensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ConfigError(f"stride must be >= 1, got {(sh, sw)}")
    n, f, h, w = x.shape
    kf, c, kh, kw = kernel.shape
    if kf != f:
        raise ShapeError(f"kernel expects {kf} input channels, input has {f}")
    out_h = (h - 1) * sh - 2 * ph + kh
    out_w = (w - 1) * sw - 2 * pw + kw
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"non-positive transposed-conv output extent for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {(sh, sw)}, padding {(ph, pw)}")
    wmat = reshape(kernel, (f, c * kh * kw))
    cols = matmul(transpose_last(wmat), reshape(x, (n, f, h * w)))
    return col2im_op(cols, n, c, out_h, out_w, kh, kw, sh, sw, ph, pw)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def instance_norm2d(x, gamma, beta, eps=1e-5):
    """Normalize each (sample, channel) plane to zero mean / unit variance,
    then scale and shift per channel."""
    x = astensor(x)
    gamma, beta = astensor(gamma), astensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm2d expects (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    mu = tmean(x, axis=(2, 3), keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=(2, 3), keepdims=True)
    xhat = div(xc, sqrt(add(var, eps)))
    return add(mul(xhat, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


class RunningStats:
    """Per-channel running mean/variance for batch norm eval mode."""

    def __init__(self, channels, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.initialized = False


def batch_norm2d(x, gamma, beta, eps=1e-5, mode="train", running=None, momentum=0.1):
    """Per-channel normalization over (N,H,W) in train mode; running stats
    in eval mode. Running stats are updated in place with the configured
    momentum (new = (1-m)*old + m*batch)."""
    x = astensor(x)
    gamma, beta = astensor(gamma), astensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    gs = reshape(gamma, (1, c, 1, 1))
    bs = reshape(beta, (1, c, 1, 1))
    if mode == "train":
        count = n * h * w
        if count < 2:
            raise ShapeError("batch_norm2d train mode requires N*H*W >= 2")
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        xc = sub(x, mu)
        var = tmean(mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        if running is not None:
            m = momentum
            batch_mean = mu.data.reshape(c)
            batch_var = var.data.reshape(c) * count / (count - 1)
            if running.initialized:
                running.mean = (1 - m) * running.mean + m * batch_mean
                running.var = (1 - m) * running.var + m * batch_var
            else:
                running.mean = batch_mean.copy()
                running.var = batch_var.copy()
                running.initialized = True
        xhat = div(xc, sqrt(add(var, eps)))
    elif mode == "eval":
        if running is None or not running.initialized:
            raise StateError("batch_norm2d eval mode requires initialized running stats")
        mu = Tensor(running.mean.reshape(1, c, 1, 1).astype(x.dtype))
        var = Tensor(running.var.reshape(1, c, 1, 1).astype(x.dtype))
        xhat = div(sub(x, mu), sqrt(add(var, eps)))
    else:
        raise ConfigError(f"unknown batch_norm2d mode {mode!r}")
    return add(mul(xhat, gs), bs)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _reachable_from(t):
    seen = set()
    stack = [t]
    nodes = {}
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        nodes[node._id] = node
        stack.extend(node._parents)
    return nodes


def grad(output, wrt, create_graph=False):
    """Differentiate a scalar tensor with respect to ``wrt``.

    With ``create_graph=True`` the returned gradients carry their own
    graph, so they can be differentiated again (double backward).
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    output = astensor(output)
    if output.size != 1:
        raise ShapeError(f"grad expects a scalar output, got shape {output.shape}")
    nodes = _reachable_from(output)
    for t in targets:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise GraphError("grad target does not require grad")
        if t._id not in nodes:
            raise GraphError("grad target does not participate in the output's graph")

    grads = {output._id: Tensor(np.ones_like(output.data))}
    order = sorted(nodes, reverse=True)
    with _grad_mode(create_graph):
        for nid in order:
            node = nodes[nid]
            g = grads.get(nid)
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = add(grads[parent._id], pg)
                else:
                    grads[parent._id] = pg
    results = []
    for t in targets:
        gt = grads.get(t._id)
        if gt is None:
            gt = Tensor(np.zeros_like(t.data))
        results.append(gt)
    return results[0] if single else results
