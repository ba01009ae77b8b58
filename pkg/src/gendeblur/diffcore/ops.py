"""Differentiable primitives.

Layer ops use NCHW layout.  The forward-model convolution :func:`conv2d_full`
and :func:`tv_norm` use image layout ``(..., H, W, C)`` with any number of
leading batch dimensions.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as sfft

from gendeblur.errors import NumericError, ShapeError
from gendeblur.diffcore.tensor import Tensor, as_tensor, default_dtype, make_result


def _cast(arr):
    return np.asarray(arr, dtype=default_dtype())


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


def _grad_if(t, fn):
    """``fn()`` when ``t`` needs a gradient, else None (skips work for constants)."""
    return fn() if t.requires_grad else None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _grad_if(a, lambda: _unbroadcast(g, a.shape)), _grad_if(b, lambda: _unbroadcast(g, b.shape))

    return make_result(_cast(out), (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _grad_if(a, lambda: _unbroadcast(g, a.shape)), _grad_if(b, lambda: _unbroadcast(-g, b.shape))

    return make_result(_cast(out), (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_grad_if(a, lambda: _unbroadcast(g * b.data, a.shape)),
                _grad_if(b, lambda: _unbroadcast(g * a.data, b.shape)))

    return make_result(_cast(out), (a, b), vjp, "mul")


def neg(a):
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    a = as_tensor(a)

    def vjp(g):
        return (2.0 * g * a.data,)

    return make_result(_cast(a.data * a.data), (a,), vjp, "square")


def exp(a):
    a = as_tensor(a)
    out = _cast(np.exp(a.data))
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def absolute(a):
    """Elementwise ``|a|`` with subgradient 0 at 0."""
    a = as_tensor(a)
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    out = _cast(np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), vjp, "sigmoid")


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    """Sum with a float64 accumulator."""
    a = as_tensor(a)
    out = _cast(a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims))
    shape = a.shape

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(a.data.dtype),)

    return make_result(out, (a,), vjp, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make_result(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose"
    )


def take(a, index, axis=0):
    """``a`` indexed by an integer or integer array along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        np.add.at(full, tuple(sl), g)
        return (full,)

    return make_result(out, (a,), vjp, "take")


def split_last(a, sizes):
    """Split the last axis into consecutive chunks of the given sizes."""
    a = as_tensor(a)
    if sum(sizes) != a.shape[-1]:
        raise ShapeError(f"cannot split last axis {a.shape[-1]} into {sizes}")
    outs = []
    start = 0
    for n in sizes:
        sl = slice(start, start + n)

        def vjp(g, sl=sl):
            full = np.zeros_like(a.data)
            full[..., sl] = g
            return (full,)

        outs.append(make_result(np.ascontiguousarray(a.data[..., sl]), (a,), vjp, "split"))
        start += n
    return outs


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def dense(x, W, b):
    """Fully connected layer ``y = W x + b`` over the last axis of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: x{x.shape}, W{W.shape}, b{b.shape} do not conform")
    out = x.data @ W.data.T + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g @ W.data) if x.requires_grad else None
        gW = (g2.T @ x2) if W.requires_grad else None
        gb = g2.sum(axis=0, dtype=np.float64) if b.requires_grad else None
        return gx, gW, gb

    return make_result(_cast(out), (x, W, b), vjp, "dense")


def _check_nchw(x, what):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects NCHW input, got shape {x.shape}")


def _im2col(x, k, stride, ho, wo):
    """cols[c, a, b, n, i, j] = x[n, c, a + stride*i, b + stride*j]."""
    n, c = x.shape[:2]
    xt = x.transpose(1, 0, 2, 3)
    if stride == k and x.shape[2] == k * ho and x.shape[3] == k * wo:
        # non-overlapping tiles: a pure reshuffle
        return np.ascontiguousarray(xt.reshape(c, n, ho, k, wo, k).transpose(0, 3, 5, 1, 2, 4))
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, a, b] = xt[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]
    return cols


def _col2im(cols, stride, out_hw):
    """Adjoint of :func:`_im2col`; returns an NCHW view of a CNHW buffer."""
    c, k, _, n, ho, wo = cols.shape
    if stride == k and tuple(out_hw) == (k * ho, k * wo):
        out = cols.transpose(0, 3, 4, 1, 5, 2).reshape(c, n, k * ho, k * wo)
        return out.transpose(1, 0, 2, 3)
    out = np.zeros((c, n) + tuple(out_hw), dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            out[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += cols[:, a, b]
    return out.transpose(1, 0, 2, 3)


def _channels_first(g):
    """(N, C, H, W) -> contiguous (C, N*H*W)."""
    return np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(g.shape[1], -1)


def _conv_out(size, k, stride, what):
    out = (size - k) // stride + 1
    if size < k or out <= 0:
        raise ShapeError(f"{what}: kernel {k} with stride {stride} does not fit input size {size}")
    return out


def conv2d(x, w, b=None, stride=1):
    """Valid-padding convolution layer (cross-correlation, as in CNN layers).

    x (N,Ci,H,W); w (Co,Ci,k,k); b (Co,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_nchw(x, "conv")
    if w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv: filters {w.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise ShapeError("conv: stride must be positive")
    n = x.shape[0]
    co, ci, k, _ = w.shape
    ho = _conv_out(x.shape[2], k, stride, "conv")
    wo = _conv_out(x.shape[3], k, stride, "conv")
    cols = _im2col(x.data, k, stride, ho, wo)
    w2 = w.data.reshape(co, -1)
    out = (w2 @ cols.reshape(ci * k * k, -1)).reshape(co, n, ho, wo)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None, None]
        parents = (x, w, b)

    def vjp(g):
        gt = _channels_first(g)
        gx = gw = None
        if x.requires_grad:
            gx = _col2im((w2.T @ gt).reshape(ci, k, k, n, ho, wo), stride, x.shape[2:])
        if w.requires_grad:
            gw = (gt @ cols.reshape(ci * k * k, -1).T).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, _grad_if(b, lambda: gt.sum(axis=1, dtype=np.float64))

    return make_result(_cast(out.transpose(1, 0, 2, 3)), parents, vjp, "conv")


def conv_transpose2d(x, w, b=None, stride=1):
    """Transposed convolution; output size ``(in - 1) * stride + k``.

    x (N,Ci,H,W); w (Ci,Co,k,k); b (Co,) or None.  With the same filter
    array this is the exact adjoint of :func:`conv2d`.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_nchw(x, "convT")
    if w.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"convT: filters {w.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise ShapeError("convT: stride must be positive")
    n, ci, h, wd = x.shape
    co, k = w.shape[1], w.shape[-1]
    out_hw = ((h - 1) * stride + k, (wd - 1) * stride + k)
    w2 = w.data.reshape(ci, -1)
    xt = _channels_first(x.data)
    out = _col2im((w2.T @ xt).reshape(co, k, k, n, h, wd), stride, out_hw)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def vjp(g):
        gx = gw = None
        gcols = _im2col(g, k, stride, h, wd).reshape(co * k * k, -1)
        if x.requires_grad:
            gx = (w2 @ gcols).reshape(ci, n, h, wd).transpose(1, 0, 2, 3)
        if w.requires_grad:
            gw = (xt @ gcols.T).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, _grad_if(b, lambda: g.sum(axis=(0, 2, 3), dtype=np.float64))

    return make_result(_cast(out), parents, vjp, "convT")


def maxpool(x, size, stride):
    """Max pooling; gradient goes to the first maximum in row-major order."""
    x = as_tensor(x)
    _check_nchw(x, "maxpool")
    ho = _conv_out(x.shape[2], size, stride, "maxpool")
    wo = _conv_out(x.shape[3], size, stride, "maxpool")
    offsets = [(a, b) for a in range(size) for b in range(size)]
    stack = np.stack([
        x.data[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] for a, b in offsets
    ])
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        for idx, (a, b) in enumerate(offsets):
            gx[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += g * (arg == idx)
        return (gx,)

    return make_result(out, (x,), vjp, "maxpool")


def upsample_nn(x, factor):
    """Nearest-neighbour upsampling by an integer factor along H and W."""
    x = as_tensor(x)
    _check_nchw(x, "upsample")
    f = int(factor)
    if f < 1:
        raise ShapeError("upsample factor must be a positive integer")
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)
    n, c, h, w = x.shape

    def vjp(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5), dtype=np.float64),)

    return make_result(out, (x,), vjp, "upsample")


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Batch normalisation with per-batch statistics over all but axis 1."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: x{x.shape}, gamma{gamma.shape}, beta{beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = xd.size // x.shape[1]

    def vjp(g):
        g64 = g.astype(np.float64)
        gg = (g64 * xhat).sum(axis=axes)
        gb = g64.sum(axis=axes)
        gxhat = g64 * gamma.data.reshape(bshape)
        gx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, gg, gb

    return make_result(_cast(out), (x, gamma, beta), vjp, "batchnorm")


# ---------------------------------------------------------------------------
# forward model and image prior
# ---------------------------------------------------------------------------


def _embed_kernel(kernel, hw):
    """Zero-pad a (..., kh, kw) kernel to (..., H, W) with its centre at (0, 0)."""
    kh, kw = kernel.shape[-2:]
    pad = np.zeros(kernel.shape[:-2] + tuple(hw), dtype=np.float64)
    pad[..., :kh, :kw] = kernel
    return np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(-2, -1))


def _extract_kernel(full, kshape):
    kh, kw = kshape
    rolled = np.roll(full, (kh // 2, kw // 2), axis=(-2, -1))
    return rolled[..., :kh, :kw]


def conv2d_full(image, kernel):
    """Circular same-size convolution of every channel with one kernel.

    ``image`` is ``(..., H, W, C)`` and ``kernel`` is ``(..., kh, kw)``;
    leading dimensions broadcast.  This is true convolution (flipped kernel)
    with kernel entry ``(kh // 2, kw // 2)`` acting at offset zero::

        out[y, x] = sum_{a, b} kernel[a, b] * image[y - a + kh//2, x - b + kw//2]

    with indices taken modulo the image size.  Computed via FFT in float64.
    """
    image, kernel = as_tensor(image), as_tensor(kernel)
    if image.ndim < 3 or kernel.ndim < 2:
        raise ShapeError(f"conv2d_full: image {image.shape} must be (...,H,W,C), kernel (...,kh,kw)")
    h, w = image.shape[-3:-1]
    kh, kw = kernel.shape[-2:]
    if kh > h or kw > w:
        raise ShapeError(f"conv2d_full: kernel {kh}x{kw} larger than image {h}x{w}")
    if not (np.isfinite(image.data).all() and np.isfinite(kernel.data).all()):
        raise NumericError("conv2d_full: non-finite input")

    img = np.moveaxis(image.data.astype(np.float64), -1, -3)  # (..., C, H, W)
    fi = sfft.rfft2(img)
    fk = sfft.rfft2(_embed_kernel(kernel.data.astype(np.float64), (h, w)))[..., None, :, :]
    out = np.moveaxis(sfft.irfft2(fi * fk, s=(h, w)), -3, -1)

    def vjp(g):
        gi = gk = None
        fg = sfft.rfft2(np.moveaxis(g.astype(np.float64), -1, -3))
        if image.requires_grad:
            gi = np.moveaxis(sfft.irfft2(fg * np.conj(fk), s=(h, w)), -3, -1)
            gi = _unbroadcast(gi, image.shape)
        if kernel.requires_grad:
            full = sfft.irfft2((fg * np.conj(fi)).sum(axis=-3), s=(h, w))
            gk = _unbroadcast(_extract_kernel(full, (kh, kw)), kernel.shape)
        return gi, gk

    return make_result(_cast(out), (image, kernel), vjp, "conv2d_full")


def tv_norm(image):
    """Anisotropic total variation of ``(..., H, W, C)`` images.

    Sum over channels of absolute forward differences along W and H, without
    wrap-around.  Returns one value per leading batch index.
    """
    image = as_tensor(image)
    if image.ndim < 3:
        raise ShapeError(f"tv_norm expects (...,H,W,C), got {image.shape}")
    d = image.data
    dx = d[..., :, 1:, :] - d[..., :, :-1, :]
    dy = d[..., 1:, :, :] - d[..., :-1, :, :]
    out = np.abs(dx).sum(axis=(-3, -2, -1), dtype=np.float64) + np.abs(dy).sum(
        axis=(-3, -2, -1), dtype=np.float64
    )

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)[..., None, None, None]
        sx = np.sign(dx) * g
        sy = np.sign(dy) * g
        gi = np.zeros(d.shape, dtype=np.float64)
        gi[..., :, 1:, :] += sx
        gi[..., :, :-1, :] -= sx
        gi[..., 1:, :, :] += sy
        gi[..., :-1, :, :] -= sy
        return (gi,)

    return make_result(_cast(out), (image,), vjp, "tv")


# ---------------------------------------------------------------------------
# operator sugar
# ---------------------------------------------------------------------------

Tensor.__add__ = lambda a, b: add(a, b)
Tensor.__radd__ = lambda a, b: add(b, a)
Tensor.__sub__ = lambda a, b: sub(a, b)
Tensor.__rsub__ = lambda a, b: sub(b, a)
Tensor.__mul__ = lambda a, b: mul(a, b)
Tensor.__rmul__ = lambda a, b: mul(b, a)
Tensor.__truediv__ = lambda a, b: mul(a, 1.0 / b)
Tensor.__neg__ = lambda a: neg(a)
Tensor.sum = lambda a, axis=None, keepdims=False: tsum(a, axis, keepdims)
Tensor.mean = lambda a, axis=None: mean(a, axis)
Tensor.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 else shape)
