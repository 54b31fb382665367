"""Pure-numpy implementations of the hot data-movement kernels.

These back conv2d and max-pooling when the compiled extension is not
available. Each function has a signature-identical twin in ``_native``.
"""

import numpy as np

BACKEND = "numpy"


def _out_dim(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold (B,C,H,W) into patch columns of shape (B, C*kh*kw, OH*OW)."""
    b, c, h, w = x.shape
    oh = _out_dim(h, kh, stride, pad)
    ow = _out_dim(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b, c * kh * kw, oh * ow)


def col2im(cols, h, w, kh, kw, stride, pad):
    """Fold patch columns back onto a (B,C,H,W) grid, summing overlaps."""
    b = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    oh = _out_dim(h, kh, stride, pad)
    ow = _out_dim(w, kw, stride, pad)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def maxpool_forward(x, k, stride, pad):
    """Windowed max. Returns (out, argmax) with argmax as flat H*W indices.

    Ties resolve to the lowest flat input index; padding acts as -inf.
    """
    b, c, h, w = x.shape
    oh = _out_dim(h, k, stride, pad)
    ow = _out_dim(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, oh, ow, k, k),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    windows = np.ascontiguousarray(view).reshape(b, c, oh, ow, k * k)
    local = windows.argmax(-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    oy = np.arange(oh)[:, None] * stride
    ox = np.arange(ow)[None, :] * stride
    rows = oy[None, None] + local // k - pad
    colx = ox[None, None] + local % k - pad
    return out, (rows * w + colx).astype(np.int64)


def maxpool_backward(dout, argmax, h, w):
    """Scatter each output gradient onto its argmax input cell."""
    b, c = dout.shape[:2]
    base = (np.arange(b * c, dtype=np.int64) * (h * w)).reshape(b, c, 1, 1)
    flat = (argmax + base).ravel()
    acc = np.bincount(flat, weights=dout.ravel(), minlength=b * c * h * w)
    return acc.reshape(b, c, h, w).astype(dout.dtype, copy=False)
