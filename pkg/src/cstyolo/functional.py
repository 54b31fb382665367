"""Differentiable network operations over :class:`~cstyolo.tensor.Tensor`.

Convolution and max-pooling route their data movement through the selected
kernel backend; everything else is plain numpy. im2col matrices are cached
for backward only when small, otherwise recomputed, which keeps peak memory
flat during training.
"""

import numpy as np

from . import kernels as K
from .errors import ShapeError
from .tensor import Tensor

COLS_CACHE_BYTES = 8 << 20


def _ascont(a):
    return np.ascontiguousarray(a)


def _sigmoid_array(x):
    # exp overflow for very negative x saturates to 0 correctly; silence it
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _batched_outer_sum(g2, cols):
    """sum_b g2[b] @ cols[b].T without tensordot's transpose copies."""
    out = g2[0] @ cols[0].swapaxes(-1, -2)
    for i in range(1, g2.shape[0]):
        out += g2[i] @ cols[i].swapaxes(-1, -2)
    return out


def conv_out_dim(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation, (B,Cin,H,W) x (O,Cin,kh,kw) -> (B,O,OH,OW)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    co, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    oh = conv_out_dim(h, kh, stride, padding)
    ow = conv_out_dim(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be {oh}x{ow} for input {h}x{wd}, kernel {kh}x{kw}")

    w2 = w.data.reshape(co, cin * kh * kw)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        x2 = _ascont(xs).reshape(bsz, cin, oh * ow)
        y = np.matmul(w2, x2).reshape(bsz, co, oh, ow)
        if b is not None:
            y += b.data.reshape(1, co, 1, 1)
        parents = (x, w) if b is None else (x, w, b)
        out = Tensor.result(y, parents, None)

        def backward():
            g2 = out.grad.reshape(bsz, co, oh * ow)
            if w.requires_grad:
                w.accum_grad(_batched_outer_sum(g2, x2).reshape(w.shape))
            if b is not None and b.requires_grad:
                b.accum_grad(g2.sum((0, 2)))
            if x.requires_grad:
                dx2 = np.matmul(w2.T, g2).reshape(bsz, cin, oh, ow)
                if stride > 1:
                    dx = np.zeros_like(x.data)
                    dx[:, :, ::stride, ::stride] = dx2
                else:
                    dx = dx2
                x.accum_grad(dx)

        if out._prev:
            out._backward = backward
        return out

    xd = _ascont(x.data)
    cols = K.im2col(xd, kh, kw, stride, padding)
    y = np.matmul(w2, cols).reshape(bsz, co, oh, ow)
    if b is not None:
        y += b.data.reshape(1, co, 1, 1)
    saved_cols = cols if cols.nbytes <= COLS_CACHE_BYTES else None
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor.result(y, parents, None)

    def backward():
        g2 = out.grad.reshape(bsz, co, oh * ow)
        c = saved_cols if saved_cols is not None else K.im2col(xd, kh, kw, stride, padding)
        if w.requires_grad:
            w.accum_grad(_batched_outer_sum(g2, c).reshape(w.shape))
        if b is not None and b.requires_grad:
            b.accum_grad(g2.sum((0, 2)))
        if x.requires_grad:
            dcols = _ascont(np.matmul(w2.T, g2))
            x.accum_grad(K.col2im(dcols, h, wd, kh, kw, stride, padding))

    if out._prev:
        out._backward = backward
    return out


def batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.03, eps=1e-3):
    """Per-channel batch normalization with EMA running statistics.

    ``running_mean``/``running_var`` are plain ndarrays mutated in train
    mode; eval mode treats them as constants.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d affine shape {gamma.shape} does not match {c} channels")
    xd = x.data
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3), dtype=xd.dtype)
        sq = np.einsum("bchw,bchw->c", xd, xd, optimize=True) / n
        var = np.maximum(sq - mean * mean, 0)
        unbiased = var * (n / max(n - 1, 1))
        running_mean += momentum * (mean - running_mean)
        running_var += momentum * (unbiased - running_var)
    else:
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    scale = (gamma.data * inv).astype(xd.dtype, copy=False)
    shift = (beta.data - mean * scale).astype(xd.dtype, copy=False)
    y = xd * scale.reshape(1, c, 1, 1)
    y += shift.reshape(1, c, 1, 1)
    out = Tensor.result(y, (x, gamma, beta), None)

    def backward():
        g = out.grad
        inv4 = inv.reshape(1, c, 1, 1).astype(xd.dtype, copy=False)
        mean4 = mean.reshape(1, c, 1, 1).astype(xd.dtype, copy=False)
        xhat = (xd - mean4) * inv4
        if gamma.requires_grad:
            gamma.accum_grad(np.einsum("bchw,bchw->c", g, xhat, optimize=True))
        if beta.requires_grad:
            beta.accum_grad(g.sum((0, 2, 3)))
        if x.requires_grad:
            if training:
                n = xd.shape[0] * xd.shape[2] * xd.shape[3]
                gam4 = gamma.data.reshape(1, c, 1, 1)
                s1 = g.sum((0, 2, 3), keepdims=True) / n
                s2 = np.einsum("bchw,bchw->c", g, xhat, optimize=True).reshape(1, c, 1, 1) / n
                x.accum_grad((g - s1 - xhat * s2) * (gam4 * inv4))
            else:
                x.accum_grad(g * scale.reshape(1, c, 1, 1))

    if out._prev:
        out._backward = backward
    return out


# -- activations ---------------------------------------------------------------


def sigmoid(x):
    return x.sigmoid()


def silu(x):
    xd = x.data
    sig = _sigmoid_array(xd)
    out = Tensor.result(xd * sig, (x,), None)

    def backward():
        x.accum_grad(out.grad * sig * (1.0 + xd * (1.0 - sig)))

    if out._prev:
        out._backward = backward
    return out


def leaky_relu(x, negative_slope=0.1):
    mask = x.data > 0
    out = Tensor.result(np.where(mask, x.data, negative_slope * x.data), (x,), None)

    def backward():
        x.accum_grad(out.grad * np.where(mask, 1.0, negative_slope).astype(x.data.dtype))

    if out._prev:
        out._backward = backward
    return out


_ACTIVATIONS = {"silu": silu, "sigmoid": sigmoid, "leaky_relu": leaky_relu}


def activation(x, kind):
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ShapeError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


# -- pooling ---------------------------------------------------------------------


def max_pool2d(x, k, stride=None, padding=0):
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {x.shape}")
    stride = k if stride is None else stride
    b, c, h, w = x.shape
    oh = conv_out_dim(h, k, stride, padding)
    ow = conv_out_dim(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool2d output would be {oh}x{ow}")
    y, argmax = K.maxpool_forward(_ascont(x.data), k, stride, padding)
    out = Tensor.result(y, (x,), None)

    def backward():
        x.accum_grad(K.maxpool_backward(_ascont(out.grad), argmax, h, w))

    if out._prev:
        out._backward = backward
    return out


def avg_pool2d(x, k, stride=None, padding=0):
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects 4-D input, got {x.shape}")
    stride = k if stride is None else stride
    b, c, h, w = x.shape
    oh = conv_out_dim(h, k, stride, padding)
    ow = conv_out_dim(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"avg_pool2d output would be {oh}x{ow}")
    flat = _ascont(x.data).reshape(b * c, 1, h, w)
    cols = K.im2col(flat, k, k, stride, padding)
    y = cols.mean(axis=1).reshape(b, c, oh, ow)
    out = Tensor.result(y, (x,), None)

    def backward():
        g = out.grad.reshape(b * c, 1, oh * ow) / (k * k)
        dcols = _ascont(np.broadcast_to(g, (b * c, k * k, oh * ow)))
        dx = K.col2im(dcols, h, w, k, k, stride, padding)
        x.accum_grad(dx.reshape(b, c, h, w))

    if out._prev:
        out._backward = backward
    return out


def pool2d(x, kind, k, stride=None, padding=0):
    if kind == "max":
        return max_pool2d(x, k, stride, padding)
    if kind == "avg":
        return avg_pool2d(x, k, stride, padding)
    raise ShapeError(f"unknown pooling kind {kind!r}")


def _bin_edges(size, bins):
    starts = [(i * size) // bins for i in range(bins)]
    ends = [-(-((i + 1) * size) // bins) for i in range(bins)]
    return starts, ends


def adaptive_avg_pool2d(x, out_h, out_w):
    """Bin-average pooling to an exact (out_h, out_w) grid."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"adaptive target ({out_h},{out_w}) exceeds input ({h},{w})")
    rs, re = _bin_edges(h, out_h)
    cs, ce = _bin_edges(w, out_w)
    y = np.empty((b, c, out_h, out_w), dtype=x.data.dtype)
    for i in range(out_h):
        for j in range(out_w):
            y[:, :, i, j] = x.data[:, :, rs[i] : re[i], cs[j] : ce[j]].mean(axis=(2, 3))
    out = Tensor.result(y, (x,), None)

    def backward():
        dx = np.zeros_like(x.data)
        for i in range(out_h):
            for j in range(out_w):
                n = (re[i] - rs[i]) * (ce[j] - cs[j])
                dx[:, :, rs[i] : re[i], cs[j] : ce[j]] += out.grad[:, :, i : i + 1, j : j + 1] / n
        x.accum_grad(dx)

    if out._prev:
        out._backward = backward
    return out


def upsample_nearest(x, out_h, out_w):
    """Nearest-neighbor upsampling; source index is floor(dst * H / out_h)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample target ({out_h},{out_w}) smaller than input ({h},{w})")
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    y = x.data[:, :, rows[:, None], cols[None, :]]
    out = Tensor.result(y, (x,), None)

    def backward():
        rstarts = np.searchsorted(rows, np.arange(h))
        cstarts = np.searchsorted(cols, np.arange(w))
        dx = np.add.reduceat(np.add.reduceat(out.grad, rstarts, axis=2), cstarts, axis=3)
        x.accum_grad(dx.astype(x.data.dtype, copy=False))

    if out._prev:
        out._backward = backward
    return out


# -- concat / split -----------------------------------------------------------------


def concat(xs, axis=1):
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        other[axis] = ref[axis]
        if other != ref:
            raise ShapeError(f"concat shape mismatch off axis {axis}: {xs[0].shape} vs {t.shape}")
    y = np.concatenate([t.data for t in xs], axis=axis)
    out = Tensor.result(y, tuple(xs), None)

    def backward():
        idx = [slice(None)] * y.ndim
        ofs = 0
        for t in xs:
            n = t.shape[axis]
            if t.requires_grad:
                idx[axis] = slice(ofs, ofs + n)
                t.accum_grad(out.grad[tuple(idx)])
            ofs += n

    if out._prev:
        out._backward = backward
    return out


def split(x, parts, axis=1):
    n = x.shape[axis]
    if n % parts:
        raise ShapeError(f"cannot split {n} channels into {parts} equal parts")
    step = n // parts
    outs = []
    for i in range(parts):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        idx = tuple(idx)
        piece = Tensor.result(_ascont(x.data[idx]), (x,), None)

        def backward(piece=piece, idx=idx):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[idx] += piece.grad

        if piece._prev:
            piece._backward = backward
        outs.append(piece)
    return outs


# -- dense / attention ----------------------------------------------------------------


def linear(x, w, b=None):
    """x @ w + b with w of shape (in_features, out_features)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {w.shape[0]}")
    y = x.data @ w.data
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor.result(y, parents, None)

    def backward():
        g = out.grad
        if x.requires_grad:
            x.accum_grad(g @ w.data.T)
        if w.requires_grad:
            nd = g.ndim - 1
            w.accum_grad(np.tensordot(x.data, g, axes=(tuple(range(nd)), tuple(range(nd)))))
        if b is not None and b.requires_grad:
            b.accum_grad(g.reshape(-1, g.shape[-1]).sum(0))

    if out._prev:
        out._backward = backward
    return out


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor.result(y, (x,), None)

    def backward():
        g = out.grad
        x.accum_grad(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    if out._prev:
        out._backward = backward
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis with learnable affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gamma.shape} does not match feature dim {d}")
    xd = x.data
    mean = xd.mean(-1, keepdims=True)
    var = xd.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    y = xhat * gamma.data + beta.data
    out = Tensor.result(y, (x, gamma, beta), None)

    def backward():
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gamma.accum_grad((g * xhat).sum(lead))
        if beta.requires_grad:
            beta.accum_grad(g.sum(lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            s1 = dxhat.mean(-1, keepdims=True)
            s2 = (dxhat * xhat).mean(-1, keepdims=True)
            x.accum_grad((dxhat - s1 - xhat * s2) * inv)

    if out._prev:
        out._backward = backward
    return out


def attention(q, k, v, heads, mask=None, return_weights=False):
    """Multi-head scaled dot-product attention over (..., T, d) tokens.

    ``mask`` is an additive logit bias broadcastable to (N, heads, T, T).
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (t.reshape(1, *t.shape) for t in (q, k, v))
    n, t, d = q.shape
    if d % heads:
        raise ShapeError(f"token dim {d} not divisible by {heads} heads")
    dh = d // heads

    def to_heads(z):
        return z.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = to_heads(q), to_heads(k), to_heads(v)
    logits = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        if not isinstance(mask, Tensor):
            mask = Tensor(mask, dtype=q.dtype)
        logits = logits + mask
    attn = softmax(logits, axis=-1)
    out = (attn @ vh).transpose(0, 2, 1, 3).reshape(n, t, d)
    if squeeze:
        out = out.reshape(t, d)
    if return_weights:
        return out, attn
    return out


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    z = logits.data
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor.result(loss, (logits,), None)

    def backward():
        logits.accum_grad(out.grad * (_sigmoid_array(z) - t))

    if out._prev:
        out._backward = backward
    return out
