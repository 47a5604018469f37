"""Differentiable layer set: convolution, pooling, activations, tempered
softmax, bilinear resize and the small glue ops the predictor needs.

Convolutions run as im2col matrix products; backward uses per-offset
tensor contractions so arbitrary strides work without a scatter pass.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, as_tensor


def _conv_out(extent: int, k: int, pad: int, stride: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is (C,H,W) or (N,C,H,W); ``weight`` is
    (F,C,kh,kw); ``bias`` is (F,) or None. Differentiable in all three."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be 3-D or 4-D, got {x.ndim}-D")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got {weight.ndim}-D")
    n, c, h, w = xd.shape
    f, ck, kh, kw = weight.data.shape
    if ck != c:
        raise ShapeError(
            f"conv2d: input channels {c} != kernel input channels {ck}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (f,):
            raise ShapeError(
                f"conv2d: bias shape {bias.data.shape} != output channels ({f},)")

    ho, wo = _conv_out(h, kh, padding, stride), _conv_out(w, kw, padding, stride)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else xd
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp, (n, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    cols = view.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, n * ho * wo)
    out = (weight.data.reshape(f, -1) @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]
    if squeeze:
        out = out[0]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(node):
        g = node.grad
        g4 = g[None] if squeeze else g
        if bias is not None and bias.requires_grad:
            bias._accumulate(g4.sum(axis=(0, 2, 3)))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        if not (need_x or need_w):
            return
        xpb = xp  # padded input reused; xd is a view of x.data
        if need_w:
            dw = np.empty_like(weight.data)
        if need_x:
            dxp = np.zeros_like(xpb)
            gm = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(-1, f)
        for i in range(kh):
            for j in range(kw):
                xs = xpb[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                if need_w:
                    dw[:, :, i, j] = np.tensordot(g4, xs, axes=([0, 2, 3], [0, 2, 3]))
                if need_x:
                    contrib = (gm @ weight.data[:, :, i, j]).reshape(n, ho, wo, c)
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        contrib.transpose(0, 3, 1, 2)
        if need_w:
            weight._accumulate(dw)
        if need_x:
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            x._accumulate(dx[0] if squeeze else dx)

    return Tensor._result(out, parents, bwd)


def max_pool2d(x, window: int, stride: int | None = None) -> Tensor:
    """Windowed maximum over the two trailing spatial axes. Backward routes
    the gradient to the first maximal element, scanning each window row-major."""
    x = as_tensor(x)
    if stride is None:
        stride = window
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    if window > h or window > w:
        raise ShapeError(
            f"max_pool2d: window {window} exceeds spatial extents {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    s0, s1, s2, s3 = xd.strides
    view = as_strided(
        xd, (n, c, ho, wo, window, window),
        (s0, s1, s2 * stride, s3 * stride, s2, s3))
    flat = view.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)  # argmax: first occurrence on ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_ret = out[0] if squeeze else out

    def bwd(node):
        g = node.grad
        g4 = g[None] if squeeze else g
        dx = np.zeros_like(xd)
        for q in range(window * window):
            i, j = divmod(q, window)
            sel = idx == q
            if sel.any():
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    np.where(sel, g4, 0.0)
        x._accumulate(dx[0] if squeeze else dx)

    return Tensor._result(out_ret, (x,), bwd)


def leaky_relu(x, slope: float) -> Tensor:
    """x for x > 0, slope*x otherwise; the subgradient at 0 is slope."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu: slope must be in [0, 1), got {slope}")
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)

    def bwd(node):
        x._accumulate(node.grad * np.where(pos, 1.0, slope))

    return Tensor._result(out, (x,), bwd)


def softmax_tau(logits, tau: float) -> Tensor:
    """Temperature softmax along the last axis, max-subtracted for stability."""
    if tau <= 0:
        raise ValueError(f"softmax_tau: tau must be > 0, got {tau}")
    logits = as_tensor(logits)
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(node):
        g = node.grad
        logits._accumulate((p * (g - (g * p).sum(axis=-1, keepdims=True))) / tau)

    return Tensor._result(p, (logits,), bwd)


def softmax_tau_masked(logits_row: np.ndarray, tau: float,
                       blocked: np.ndarray | None = None) -> np.ndarray:
    """Plain-numpy tempered softmax of one row with ``blocked`` cells forced
    to probability zero. Shared by the pattern sampler's soft path."""
    if tau <= 0:
        raise ValueError(f"softmax_tau: tau must be > 0, got {tau}")
    z = np.asarray(logits_row, dtype=np.float64) / tau
    if blocked is not None and blocked.any():
        z = np.where(blocked, -np.inf, z)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _linear_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix carrying 1-D bilinear interpolation n_in -> n_out
    (half-pixel centers, edges clamped)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the trailing two axes of an (N,C,H,W) tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"resize_bilinear: expected 4-D input, got {x.ndim}-D")
    _, _, h, w = x.data.shape
    mh = _linear_resize_matrix(h, out_h)
    mw = _linear_resize_matrix(w, out_w)
    out = np.einsum("oh,nchw,pw->ncop", mh, x.data, mw, optimize=True)

    def bwd(node):
        x._accumulate(np.einsum("oh,ncop,pw->nchw", mh, node.grad, mw, optimize=True))

    return Tensor._result(out, (x,), bwd)


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate tensors along ``axis``."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(node):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.ndim
                sl[axis] = slice(a, b)
                t._accumulate(node.grad[tuple(sl)])

    return Tensor._result(out, tuple(tensors), bwd)


def repeat_batch(x, times: int) -> Tensor:
    """Tile an (N, ...) tensor to (N*times, ...), each row repeated
    consecutively; backward sums the copies."""
    x = as_tensor(x)
    n = x.data.shape[0]
    out = np.repeat(x.data, times, axis=0)

    def bwd(node):
        x._accumulate(node.grad.reshape(n, times, *x.data.shape[1:]).sum(axis=1))

    return Tensor._result(out, (x,), bwd)
