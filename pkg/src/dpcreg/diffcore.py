"""Minimal define-by-run reverse-mode differentiation over numpy arrays.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result remembers its parents and a backward rule. :func:`backward` orders the
graph reachable from a scalar loss into a :class:`Tape` and walks it in
reverse, accumulating into the ``grad`` of leaf tensors.

Binary elementwise ops require equal shapes. Broadcasting is explicit through
:func:`broadcast_to`.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dpcreg import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) and dtype is None:
        return data
    return np.asarray(data, dtype=dtype or np.float64)


class Tensor:
    """Dense real array with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if _is_tensorish(other) else shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if _is_tensorish(other) else shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other) if _is_tensorish(other) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if _is_tensorish(other) else scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return gather(self, index)


def _is_tensorish(x):
    return isinstance(x, (Tensor, np.ndarray))


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward_fn, op):
    """Create an op result; ``backward_fn(g)`` returns one gradient per parent."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


class Tape:
    """Graph nodes reachable from an output, in topological order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
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
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Populate ``grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate across calls; reset with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise ------------------------------------------------------------

def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "mul")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "div")
    out = a.data / b.data
    return make_node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def scale(a, c):
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a, c):
    return make_node(a.data + c, (a,), lambda g: (g,), "shift")


def mul_const(a, c):
    """Multiply by a fixed array broadcastable to ``a.shape``; ``c`` gets no gradient."""
    c = np.asarray(c, dtype=a.dtype)
    out = a.data * c
    if out.shape != a.shape:
        raise ValueError(f"mul_const: {c.shape} does not broadcast onto {a.shape}")
    return make_node(out, (a,), lambda g: (g * c,), "mul_const")


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a):
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = np.exp(x - out)
    return make_node(out, (a,), lambda g: (g * sig,), "softplus")


def exp(a):
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def cos(a):
    s = np.sin(a.data)
    return make_node(np.cos(a.data), (a,), lambda g: (-g * s,), "cos")


def sin(a):
    c = np.cos(a.data)
    return make_node(np.sin(a.data), (a,), lambda g: (g * c,), "sin")


def log(a, floor=None):
    """Natural log; with ``floor`` the input is clamped below (zero gradient there)."""
    x = a.data
    if floor is not None:
        live = x > floor
        x = np.where(live, x, floor)
        return make_node(np.log(x), (a,), lambda g: (g * live / x,), "log")
    return make_node(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / np.maximum(out, 1e-300),), "sqrt")


def abs_(a):
    sign = np.sign(a.data)
    return make_node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "log": log, "exp": exp, "negate": neg, "cos": cos, "sin": sin,
          "softplus": softplus, "sqrt": sqrt, "abs": abs_}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind, a, b=None):
    """Dispatch an elementwise op by name.

    ``scale-by-constant`` takes the constant as ``b``.
    """
    if kind == "scale-by-constant":
        return scale(_wrap(a), float(b))
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](_wrap(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- shape and reduction ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return make_node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axes, keepdims), 1.0 / n)


def amax(a, axis=None, keepdims=False):
    """Max reduction; the gradient is shared evenly between tied maxima."""
    axes = _norm_axes(axis, a.ndim)
    m = a.data.max(axis=axes, keepdims=True)
    mask = a.data == m
    count = mask.sum(axis=axes, keepdims=True)
    out = m if keepdims else np.squeeze(m, axis=axes)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (mask * (g / count),)
    return make_node(out, (a,), bw, "amax")


def broadcast_to(a, shape):
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)

    def bw(g):
        axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1)
        g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(src),)
    return make_node(np.broadcast_to(a.data, shape).copy(), (a,), bw, "broadcast")


def reshape(a, shape):
    src = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def roll(a, shift, axis):
    if isinstance(shift, int):
        shift, axis = (shift,), (axis,)
    back = tuple(-s for s in shift)
    return make_node(np.roll(a.data, shift, axis), (a,),
                     lambda g: (np.roll(g, back, axis),), "roll")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))
    return make_node(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def gather(a, index):
    """``a[index]`` for any numpy index; backward scatters with ``np.add.at``."""
    out = a.data[index]
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)
    return make_node(np.array(out), (a,), bw, "gather")


def pad_zeros(a, pads):
    """Zero-pad; ``pads`` is a list of (before, after) per axis."""
    sl = tuple(slice(b, a.shape[i] + b) for i, (b, _) in enumerate(pads))
    return make_node(np.pad(a.data, pads), (a,), lambda g: (g[sl],), "pad")


# -- convolution and resampling ---------------------------------------------

def _as_nchw(x):
    if x.ndim == 2:
        return x[None, None], 2
    if x.ndim == 3:
        return x[None], 3
    return x, 4


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation style 2D convolution.

    ``x`` may be (H, W), (C, H, W) or (N, C, H, W); ``kernel`` is (kh, kw) for
    single-channel 2D input, otherwise (Cout, Cin, kh, kw). Output spatial
    size is ``floor((H + 2*padding - k) / stride) + 1``.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    xd, in_rank = _as_nchw(x.data)
    wd = kernel.data
    if wd.ndim == 2:
        wd = wd[None, None]
    n, c, h, w = xd.shape
    cout, cin, kh, kw = wd.shape
    if cin != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {cin}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > w + 2 * padding or ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} yields empty output on {h}x{w} with padding {padding}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    wmat = wd.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data.reshape(1, cout, 1, 1)
    out_shape = {2: (ho, wo), 3: (cout, ho, wo), 4: (n, cout, ho, wo)}[in_rank]
    if in_rank == 2 and cout != 1:
        out_shape = (cout, ho, wo)

    def bw(g):
        g = g.reshape(n, cout, ho * wo)
        # batched matmul on a transposed view avoids copying the column matrix
        gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        dcols = np.matmul(wmat.T, g).reshape(n, c, kh, kw, ho, wo)
        dxp = np.zeros(xp.shape, dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx.reshape(x.shape), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out.reshape(out_shape), parents, bw, "conv2d")


def upsample2x(a):
    """Nearest-neighbour 2x upsampling of the last two axes."""
    out = np.repeat(np.repeat(a.data, 2, axis=-2), 2, axis=-1)
    shape = a.shape

    def bw(g):
        g = g.reshape(shape[:-2] + (shape[-2], 2, shape[-1], 2))
        return (g.sum(axis=(-3, -1)),)
    return make_node(out, (a,), bw, "upsample2x")


def avgpool2x(a):
    """2x2 mean pooling over the last two axes (extents must be even)."""
    h, w = a.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x needs even extents, got {h}x{w}")
    lead = a.shape[:-2]
    out = a.data.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)
    return make_node(out, (a,), bw, "avgpool2x")


def bilinear_sample(img, xs, ys):
    """Sample ``img`` at fractional (x=column, y=row) positions; outside reads 0.

    ``img`` is (H, W) or (B, H, W). ``xs``/``ys`` hold one coordinate set
    shared by the batch, or per-item sets of shape (B, H', W') when ``img`` is
    batched. Differentiable w.r.t. the image and the coordinates.
    """
    img = _wrap(img)
    xs_t, ys_t = _wrap(xs), _wrap(ys)
    single = img.ndim == 2
    im = img.data[None] if single else img.data
    b, h, w = im.shape
    q = xs_t.shape
    if q != ys_t.shape:
        raise ValueError(f"coordinate shapes differ: {q} vs {ys_t.shape}")
    batched_coords = not single and xs_t.ndim == 3
    qshape = q[1:] if batched_coords else q
    xf = xs_t.data.reshape(b if batched_coords else 1, -1)
    yf = ys_t.data.reshape(b if batched_coords else 1, -1)
    out = kernels.bilinear_gather(im, xf, yf).astype(img.dtype, copy=False)
    out_shape = qshape if single else (b,) + qshape

    def bw(g):
        gf = g.reshape(b, -1).astype(np.float64)
        gi = None
        if img.requires_grad:
            gi = kernels.bilinear_scatter(gf, np.broadcast_to(xf, gf.shape), np.broadcast_to(yf, gf.shape), h, w)
            gi = gi.reshape(img.shape).astype(img.dtype, copy=False)
        gx = gy = None
        if xs_t.requires_grad or ys_t.requires_grad:
            gx, gy = kernels.bilinear_coord_grad(im, xf, yf, gf)
            if not batched_coords:
                gx, gy = gx.sum(axis=0), gy.sum(axis=0)
            gx, gy = gx.reshape(q), gy.reshape(q)
        return gi, gx, gy
    return make_node(out.reshape(out_shape), (img, xs_t, ys_t), bw, "bilinear")


# -- softmax ----------------------------------------------------------------

def softmax_with_temperature(x, beta, axes=None):
    """exp(beta*x) normalized over ``axes`` (default: every element)."""
    if not beta > 0:
        raise ValueError(f"temperature beta must be positive, got {beta}")
    x = _wrap(x)
    ax = _norm_axes(axes, x.ndim)
    z = beta * (x.data - x.data.max(axis=ax, keepdims=True))
    e = np.exp(z)
    p = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (beta * p * (g - (p * g).sum(axis=ax, keepdims=True)),)
    return make_node(p, (x,), bw, "softmax")


# -- complex tensors --------------------------------------------------------

class ComplexTensor:
    """Complex array stored as a real tensor of shape (2, *shape)."""

    __slots__ = ("packed",)

    def __init__(self, packed):
        self.packed = packed

    @classmethod
    def from_real(cls, x):
        x = _wrap(x)
        shape = x.shape
        data = np.zeros((2,) + shape, dtype=x.dtype)
        data[0] = x.data
        return cls(make_node(data, (x,), lambda g: (g[0],), "to_complex"))

    @classmethod
    def from_parts(cls, re, im):
        return cls(stack([re, im], axis=0))

    @property
    def shape(self):
        return self.packed.shape[1:]

    @property
    def real(self):
        return gather(self.packed, 0)

    @property
    def imag(self):
        return gather(self.packed, 1)

    def numpy(self):
        return self.packed.data[0] + 1j * self.packed.data[1]

    def __repr__(self):
        return f"ComplexTensor(shape={self.shape})"


def _fft_packed(packed, inverse):
    d = packed.data
    z = kernels.fft2(d[0] + 1j * d[1], inverse=inverse)
    out = np.stack([z.real, z.imag]).astype(d.dtype, copy=False)

    def bw(g):
        adj = kernels.fft2(g[0] + 1j * g[1], inverse=not inverse)
        return (np.stack([adj.real, adj.imag]).astype(d.dtype, copy=False),)
    return make_node(out, (packed,), bw, "ifft2" if inverse else "fft2")


def _check_pow2(shape):
    for n in shape[-2:]:
        if n < 1 or n & (n - 1):
            raise ValueError(
                f"FFT extents must be powers of two, got {shape[-2:]}; "
                "resize the image (e.g. bilinear) to 2^k x 2^k first")


def fft2(x):
    """Unnormalized 2D DFT over the last two axes."""
    z = x if isinstance(x, ComplexTensor) else ComplexTensor.from_real(x)
    _check_pow2(z.shape)
    return ComplexTensor(_fft_packed(z.packed, inverse=False))


def ifft2(z):
    """Inverse 2D DFT (with the 1/(H*W) factor)."""
    _check_pow2(z.shape)
    h, w = z.shape[-2:]
    return ComplexTensor(scale(_fft_packed(z.packed, inverse=True), 1.0 / (h * w)))


def cmul(a, b):
    """Elementwise complex product."""
    if a.shape != b.shape:
        raise ValueError(f"cmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.packed.data, b.packed.data
    out = np.stack([ad[0] * bd[0] - ad[1] * bd[1], ad[0] * bd[1] + ad[1] * bd[0]])

    def bw(g):
        ga = np.stack([g[0] * bd[0] + g[1] * bd[1], g[1] * bd[0] - g[0] * bd[1]])
        gb = np.stack([g[0] * ad[0] + g[1] * ad[1], g[1] * ad[0] - g[0] * ad[1]])
        return ga, gb
    return ComplexTensor(make_node(out, (a.packed, b.packed), bw, "cmul"))


def conj(a):
    sign = np.array([1.0, -1.0]).reshape((2,) + (1,) * len(a.shape))
    return ComplexTensor(make_node(a.packed.data * sign, (a.packed,), lambda g: (g * sign,), "conj"))


def cscale(a, r):
    """Multiply a complex tensor by a real tensor of the same shape."""
    r = _wrap(r)
    if a.shape != r.shape:
        raise ValueError(f"cscale: shape mismatch {a.shape} vs {r.shape}")
    ad = a.packed.data

    def bw(g):
        return g * r.data[None], (g * ad).sum(axis=0)
    return ComplexTensor(make_node(ad * r.data[None], (a.packed, r), bw, "cscale"))


def magnitude(a, eps=1e-12):
    """|z| = sqrt(re^2 + im^2); the gradient denominator is floored at ``eps``."""
    d = a.packed.data
    m = np.sqrt(d[0] ** 2 + d[1] ** 2)
    denom = np.maximum(m, eps)

    def bw(g):
        return (np.stack([g * d[0] / denom, g * d[1] / denom]),)
    return make_node(m, (a.packed,), bw, "magnitude")
