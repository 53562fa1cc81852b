"""Dense tensors with reverse-mode automatic differentiation.

Every array in the pipeline (images, feature maps, logits, parameters)
is carried by :class:`Tensor`. Operations record themselves on an
implicit tape (the DAG of ``_parents`` links) whenever an input requires
gradients; ``backward`` replays the tape in reverse topological order,
accumulating gradients additively at fan-out points.

Training runs in float32 by default; gradient-check suites switch to
float64 via :func:`precision` because central finite differences are
unreachable at single precision.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operation inputs violate its shape contract."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf (aborts the step, see T-4 policy)."""


class StateError(RuntimeError):
    """Tape misuse, e.g. backward called twice through the same graph."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the default element type (e.g. float64 for checks)."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextmanager
def no_grad():
    """Disable tape recording (used for pseudo-labeling and evaluation)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._done = False

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- backward pass -------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._done:
            raise StateError("tape already consumed: backward was called twice")
        self._done = True

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _result(data, parents, op, backward):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data * b.data, (a, b), "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape),
                   _unbroadcast(g * a.data, b.shape)))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), "matmul", backward)


def relu(x):
    x = _as_tensor(x)
    return _result(np.maximum(x.data, 0), (x,), "relu",
                   lambda g: (g * (x.data > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU with the tanh approximation."""
    x = _as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        dt = (1.0 - t ** 2) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _result(out, (x,), "gelu", backward)


def sigmoid(x):
    x = _as_tensor(x)
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    return _result(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def softmax(x, axis=-1):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), "softmax", backward)


def sum_(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _result(out, (x,), "sum", backward)


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, x.shape).copy(),)

    return _result(out, (x,), "mean", backward)


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), "reshape",
                   lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = _as_tensor(x)
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), "transpose",
                   lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tensors, "concat", backward)


def slice_(x, slices):
    """Crop with a tuple of slice objects; backward zero-embeds."""
    x = _as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[slices] = g
        return (gx,)

    return _result(x.data[slices], (x,), "slice", backward)


# ---------------------------------------------------------------------------
# convolution, pooling, resampling
# ---------------------------------------------------------------------------

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * sh, s3 * sw))
    return view.reshape(n, c * kh * kw, ho * wo)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution (cross-correlation), NCHW x (Cout,Cin,kh,kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        parents.append(b)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, ci, h, wd = x.shape
    co, ci2, kh, kw = w.shape
    if ci != ci2:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} exceeds padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    wmat = w.data.reshape(co, -1)
    out = np.matmul(wmat, cols).reshape(n, co, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gmat = g.reshape(n, co, ho * wo)
        gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(wmat.T[None], gmat).reshape(n, ci, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return _result(out, parents, "conv2d", backward)


def avg_pool2d(x, kernel):
    """Average pooling with stride == kernel; kernel must divide the input.

    Rectangular kernels such as (1, W) and (H, 1) produce the strip
    features used by the long-range context branch.
    """
    x = _as_tensor(x)
    kh, kw = _pair(kernel)
    n, c, h, w = x.shape
    if h % kh or w % kw:
        raise ShapeError(f"avg_pool2d kernel {(kh, kw)} does not divide input {x.shape}")
    ho, wo = h // kh, w // kw
    out = x.data.reshape(n, c, ho, kh, wo, kw).mean(axis=(3, 5))

    def backward(g):
        gx = np.broadcast_to(
            g[:, :, :, None, :, None] / (kh * kw), (n, c, ho, kh, wo, kw))
        return (gx.reshape(n, c, h, w).copy(),)

    return _result(out, (x,), "avg_pool", backward)


def _bilinear_axis(src, dst):
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_upsample(x, size):
    """Bilinear resample of an NCHW tensor to spatial ``size`` (half-pixel centers)."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = _pair(size)
    y0, y1, fy = _bilinear_axis(h, ho)
    x0, x1, fx = _bilinear_axis(w, wo)
    fy = fy[:, None].astype(x.data.dtype)
    fx = fx[None, :].astype(x.data.dtype)
    d = x.data
    out = ((1 - fy) * (1 - fx) * d[:, :, y0[:, None], x0[None, :]]
           + (1 - fy) * fx * d[:, :, y0[:, None], x1[None, :]]
           + fy * (1 - fx) * d[:, :, y1[:, None], x0[None, :]]
           + fy * fx * d[:, :, y1[:, None], x1[None, :]])

    def backward(g):
        gx = np.zeros((h * w, n * c), dtype=g.dtype)
        gflat = g.reshape(n * c, ho * wo).T
        for ys, xs, wgt in (
                (y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
                (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx)):
            idx = (ys[:, None] * w + xs[None, :]).ravel()
            np.add.at(gx, idx, (wgt.ravel()[:, None] * gflat))
        return (gx.T.reshape(n, c, h, w),)

    return _result(out, (x,), "bilinear_upsample", backward)


def context_pool(x, patch, ratio):
    """Pooled context tokens for windowed attention.

    For each non-overlapping ``patch``x``patch`` query window of the NCHW
    input, extracts the centered ``ratio*patch`` square context window
    (clamped inside the feature at the edges) and average-pools it by
    ``ratio`` down to patch*patch tokens. Output: (N*nh*nw, patch*patch, C).
    """
    x = _as_tensor(x)
    n, c, h, w = x.shape
    p, r = int(patch), int(ratio)
    if h % p or w % p:
        raise ShapeError(f"context_pool: {p}x{p} windows do not tile input {x.shape}")
    cw = r * p
    if cw > h or cw > w:
        raise ShapeError(
            f"context_pool: context window {cw} exceeds feature extent {(h, w)}")
    nh, nw = h // p, w // p
    ty = np.clip(np.arange(nh) * p - (p * (r - 1)) // 2, 0, h - cw)
    tx = np.clip(np.arange(nw) * p - (p * (r - 1)) // 2, 0, w - cw)
    # absolute rows/cols per (window, token, intra-pool) position
    rows = ty[:, None, None] + np.arange(p)[None, :, None] * r + np.arange(r)[None, None, :]
    cols = tx[:, None, None] + np.arange(p)[None, :, None] * r + np.arange(r)[None, None, :]
    yy = rows[:, None, :, None, :, None]      # nh 1 p 1 r 1
    xx = cols[None, :, None, :, None, :]      # 1 nw 1 p 1 r
    gathered = x.data[:, :, yy, xx]           # n c nh nw p p r r
    pooled = gathered.mean(axis=(-1, -2))     # n c nh nw p p
    out = pooled.transpose(0, 2, 3, 4, 5, 1).reshape(n * nh * nw, p * p, c)

    def backward(g):
        gp = g.reshape(n, nh, nw, p, p, c).transpose(0, 5, 1, 2, 3, 4)
        gx = np.zeros((h * w, n * c), dtype=g.dtype)
        idx = (np.broadcast_to(yy, (nh, nw, p, p, r, r)) * w
               + np.broadcast_to(xx, (nh, nw, p, p, r, r))).ravel()
        vals = np.broadcast_to(
            gp[:, :, :, :, :, :, None, None] / (r * r),
            (n, c, nh, nw, p, p, r, r)).reshape(n * c, -1).T
        np.add.at(gx, idx, vals)
        return (gx.T.reshape(n, c, h, w),)

    return _result(out, (x,), "context_pool", backward)


def batch_norm(x, gamma, beta, eps=1e-5, stats=None):
    """Per-channel batch normalization over an NCHW tensor.

    ``stats=None`` is training mode: moments are computed over (N, H, W)
    and also returned so the caller can maintain running buffers.
    ``stats=(mean, var)`` is fixed-stats mode (evaluation / recalibrated).
    Returns ``(out, mean, var)``.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.shape}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    gam = gamma.data[None, :, None, None]
    bet = beta.data[None, :, None, None]

    if stats is None:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)[None, :, None, None]
        xhat = (x.data - mu[None, :, None, None]) * inv
        out = gam * xhat + bet

        def backward(g):
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            gh = g * gam
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=axes, keepdims=True) / m)
            return gx, ggamma, gbeta

        res = _result(out, (x, gamma, beta), "batch_norm", backward)
        return res, mu, var

    mu, var = stats
    inv = 1.0 / np.sqrt(var + eps)[None, :, None, None]
    xhat = (x.data - mu[None, :, None, None]) * inv
    out = gam * xhat + bet

    def backward_fixed(g):
        return g * gam * inv, (g * xhat).sum(axes), g.sum(axes)

    res = _result(out, (x, gamma, beta), "batch_norm_fixed", backward_fixed)
    return res, mu, var


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy_masked(logits, labels, ignore_id=255):
    """Mean -log softmax(logits)[label] over pixels whose label != ignore_id.

    ``logits`` is an (N, C, H, W) tensor (or (C, H, W)); ``labels`` an
    integer map of matching spatial shape. When every pixel is ignored
    the result is 0 and the returned tensor has ``empty_loss=True``.
    """
    logits = _as_tensor(logits)
    squeeze = logits.ndim == 3
    ld = logits.data[None] if squeeze else logits.data
    labels = np.asarray(labels)
    lab = labels[None] if labels.ndim == 2 else labels
    n, c, h, w = ld.shape
    if lab.shape != (n, h, w):
        raise ShapeError(
            f"cross_entropy_masked: labels {labels.shape} do not match logits {logits.shape}")
    valid = lab != ignore_id
    ids = np.where(valid, lab, 0)
    if ids.min() < 0 or ids.max() >= c:
        raise ShapeError(f"label id outside [0, {c}) in cross_entropy_masked")

    count = int(valid.sum())
    if count == 0:
        out = _result(np.zeros((), dtype=ld.dtype), (logits,), "cross_entropy",
                      lambda g: (np.zeros_like(logits.data),))
        out.empty_loss = True
        return out

    z = ld - ld.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    ni, hi, wi = np.nonzero(valid)
    loss = -logp[ni, ids[ni, hi, wi], hi, wi].sum() / count

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        onehot[ni, ids[ni, hi, wi], hi, wi] = 1.0
        gl = g * (p - onehot) * valid[:, None] / count
        return (gl[0] if squeeze else gl,)

    out = _result(np.asarray(loss, dtype=ld.dtype), (logits,), "cross_entropy", backward)
    out.empty_loss = False
    return out


# ---------------------------------------------------------------------------
# parameters and SGD
# ---------------------------------------------------------------------------

class Parameter:
    """A named trainable tensor with its gradient and momentum buffer."""

    def __init__(self, data, name):
        self.value = Tensor(data, requires_grad=True)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.value.data)

    @property
    def grad(self):
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad

    def zero_grad(self):
        self.value.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def sgd_update(params, lr, momentum=0.0, weight_decay=0.0):
    """In-place SGD: v <- momentum*v + g + wd*theta; theta <- theta - lr*v."""
    if lr <= 0:
        raise ValueError(f"sgd_update: lr must be positive, got {lr}")
    for p in params:
        g = p.grad
        v = p.momentum_buffer
        v *= momentum
        v += g + weight_decay * p.value.data
        p.value.data -= lr * v


# ---------------------------------------------------------------------------
# generic dispatch surface
# ---------------------------------------------------------------------------

OPS = {
    "matmul": lambda inputs, **a: matmul(*inputs),
    "conv2d": lambda inputs, **a: conv2d(*inputs, **a),
    "add": lambda inputs, **a: add(*inputs),
    "sub": lambda inputs, **a: sub(*inputs),
    "mul": lambda inputs, **a: mul(*inputs),
    "relu": lambda inputs, **a: relu(*inputs),
    "gelu": lambda inputs, **a: gelu(*inputs),
    "sigmoid": lambda inputs, **a: sigmoid(*inputs),
    "softmax": lambda inputs, **a: softmax(*inputs, **a),
    "sum": lambda inputs, **a: sum_(*inputs, **a),
    "mean": lambda inputs, **a: mean(*inputs, **a),
    "avg_pool": lambda inputs, **a: avg_pool2d(*inputs, **a),
    "bilinear_upsample": lambda inputs, **a: bilinear_upsample(*inputs, **a),
    "concat": lambda inputs, **a: concat(inputs, **a),
    "batch_norm": lambda inputs, **a: batch_norm(*inputs, **a)[0],
    "transpose": lambda inputs, **a: transpose(*inputs, **a),
    "reshape": lambda inputs, **a: reshape(*inputs, **a),
}


def forward_op(kind, inputs, **attrs):
    """Dispatch an operation by name; unknown kinds raise ShapeError."""
    if kind not in OPS:
        raise ShapeError(f"unknown operation kind '{kind}'")
    return OPS[kind](inputs, **attrs)
