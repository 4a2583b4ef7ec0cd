"""Differentiable primitives over ``Tensor``.

Every op computes its forward result as plain numpy and registers a fused
backward closure on the active tape. Binary ops broadcast like numpy and
un-broadcast gradients on the way back. Convolution and batch norm keep the
kernel-offset / moments algebra in a handful of tensordot calls so the hot
path stays inside BLAS.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, record


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / binary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)
    out = Tensor(a.data * b.data)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(out, (a, b), back)


def hadamard(a, b) -> Tensor:
    """Elementwise product; alias of ``mul`` kept for attention augmentation."""
    return mul(a, b)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)
    out = Tensor(a.data / b.data)

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return record(out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(Tensor(-a.data), (a,), lambda g: (-g,))


def pow_(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data ** p)
    return record(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return record(out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return record(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    return record(out, (a,), lambda g: (g * 0.5 / out.data,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sin(a.data))
    return record(out, (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.cos(a.data))
    return record(out, (a,), lambda g: (-g * np.sin(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    return record(out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # exp of the negated magnitude only: stable for large |x|.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)
    out = Tensor(out_data)
    return record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return record(out, (a,), lambda g: (g * mask,))


def smooth_l1(a) -> Tensor:
    """Elementwise Huber with unit transition: 0.5*x^2 for |x|<=1, |x|-0.5 beyond."""
    a = as_tensor(a)
    x = a.data
    absx = np.abs(x)
    out = Tensor(np.where(absx <= 1.0, 0.5 * x * x, absx - 0.5).astype(x.dtype))
    return record(out, (a,), lambda g: (g * np.clip(x, -1.0, 1.0),))


# ---------------------------------------------------------------------------
# matrix / shape
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data)

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return record(out, (a, b), back)


def linear(x, w, b) -> Tensor:
    """x (N, din) @ w (din, dout) + b (dout)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = Tensor(x.data @ w.data + b.data)
    need_x, need_w = x.tracked, w.tracked

    def back(g):
        gx = g @ w.data.T if need_x else None
        gw = x.data.T @ g if need_w else None
        return gx, gw, g.sum(axis=0)

    return record(out, (x, w, b), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    return record(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return record(out, tuple(tensors), back)


def getitem(a, idx) -> Tensor:
    """Basic (slice/int/ellipsis) indexing only; backward is a dense scatter."""
    a = as_tensor(a)
    out = Tensor(a.data[idx])

    def back(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return record(out, (a,), back)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return record(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.size / out.size

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape),)

    return record(out, (a,), back)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, NCHW input and OIKK weight.

    Output extent is floor((H + 2*padding - K)/stride) + 1. The kernel-offset
    loop turns the whole thing into K*K tensordot (GEMM) calls, which is the
    fastest pure-numpy formulation at these sizes.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be NCHW, got {x.ndim} dims")
    if w.ndim != 4:
        raise ValueError(f"conv2d: weight must be OIKK, got {w.ndim} dims")
    n, c, h, wid = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: input channels {c} != weight input channels {ci}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wid} "
                         f"with padding {padding}")

    xd, wd = x.data, w.data
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    acc = np.zeros((n, ho, wo, o), dtype=xd.dtype)
    for ki in range(kh):
        for kj in range(kw):
            view = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
            acc += np.tensordot(view, wd[:, :, ki, kj], axes=([1], [1]))
    out_data = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if b is not None:
        out_data += b.data.reshape(1, o, 1, 1)
    out = Tensor(out_data)

    need_x, need_w = x.tracked, w.tracked
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        gx = gw = None
        if need_w:
            gw = np.zeros_like(wd)
        if need_x:
            gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                if need_w:
                    view = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
                    gw[:, :, ki, kj] = np.tensordot(g, view, axes=([0, 2, 3], [0, 2, 3]))
                if need_x:
                    patch = np.tensordot(g, wd[:, :, ki, kj], axes=([1], [0]))
                    gxp[:, :, ki:ki + stride * ho:stride,
                        kj:kj + stride * wo:stride] += patch.transpose(0, 3, 1, 2)
        if need_x:
            gx = gxp[:, :, padding:padding + h, padding:padding + wid] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record(out, inputs, back)


def max_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping max pooling (stride = kernel); extents must divide."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"max_pool2d: extent {h}x{w} not divisible by kernel {kernel}")
    ho, wo = h // kernel, w // kernel
    windows = x.data.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def back(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        gx = gf.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return record(out, (x,), back)


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return mean(x, axis=(2, 3))


def pixel_shuffle(x, r: int) -> Tensor:
    """(N, C*r^2, H, W) -> (N, C, r*H, r*W); out[n,c,hr+i,wr+j] = in[n,c*r^2+i*r+j,h,w]."""
    x = as_tensor(x)
    n, cr2, h, w = x.shape
    if cr2 % (r * r):
        raise ValueError(f"pixel_shuffle: channels {cr2} not divisible by r^2={r * r}")
    c = cr2 // (r * r)
    out_data = (x.data.reshape(n, c, r, r, h, w)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(n, c, h * r, w * r))
    out = Tensor(np.ascontiguousarray(out_data))

    def back(g):
        gx = (g.reshape(n, c, h, r, w, r)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(n, cr2, h, w))
        return (np.ascontiguousarray(gx),)

    return record(out, (x,), back)


def space_to_depth(x, r: int) -> Tensor:
    """Inverse of ``pixel_shuffle``: (N, C, r*H, r*W) -> (N, C*r^2, H, W)."""
    x = as_tensor(x)
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ValueError(f"space_to_depth: extent {hr}x{wr} not divisible by r={r}")
    h, w = hr // r, wr // r
    out_data = (x.data.reshape(n, c, h, r, w, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, c * r * r, h, w))
    out = Tensor(np.ascontiguousarray(out_data))

    def back(g):
        gx = (g.reshape(n, c, r, r, h, w)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(n, c, hr, wr))
        return (np.ascontiguousarray(gx),)

    return record(out, (x,), back)


def nearest_upsample(x, factor: int) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = Tensor(np.ascontiguousarray(
        np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)))

    def back(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record(out, (x,), back)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax_temperature(z, tau: float) -> Tensor:
    """softmax(z / tau) along the last axis, max-subtracted for stability."""
    if tau <= 0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    z = as_tensor(z)
    zs = z.data / tau
    e = np.exp(zs - zs.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def back(g):
        dot = (g * out.data).sum(axis=-1, keepdims=True)
        return (out.data * (g - dot) / tau,)

    return record(out, (z,), back)


def log_softmax(z, tau: float = 1.0) -> Tensor:
    if tau <= 0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    z = as_tensor(z)
    zs = z.data / tau
    m = zs.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(zs - m).sum(axis=-1, keepdims=True))
    out = Tensor(zs - lse)

    def back(g):
        return ((g - np.exp(out.data) * g.sum(axis=-1, keepdims=True)) / tau,)

    return record(out, (z,), back)


# ---------------------------------------------------------------------------
# operator sugar on Tensor
# ---------------------------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = lambda a, b: add(a, b)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda a, b: add(neg(a), b)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda a, b: mul(a, b)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda a, b: div(Tensor(np.asarray(b, dtype=a.dtype)), a)
Tensor.__neg__ = neg
Tensor.__pow__ = pow_
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.sum = sum_
Tensor.mean = mean
Tensor.reshape = reshape
Tensor.transpose = transpose
