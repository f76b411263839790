"""Pure numpy implementations of the hot kernels.

Each function mirrors the compiled version in ``_ckernels.pyx`` exactly in
signature and semantics; results agree to floating-point reordering.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def conv2d_forward(x, w, b, pad):
    """Stride-1 cross-correlation of (N, C, H, W) input with (O, C, k, k) weights."""
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    y = y.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward(x, w, dy, pad):
    """Return (dx, dw, db) for :func:`conv2d_forward`."""
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, k, k
    db = dy.sum(axis=(0, 2, 3))
    # input gradient: full correlation of dy with the flipped kernel
    q = k - 1
    dyp = np.pad(dy, ((0, 0), (0, 0), (q, q), (q, q)))
    dwin = sliding_window_view(dyp, (k, k), axis=(2, 3))  # N, O, Hp, Wp, k, k
    dxp = np.tensordot(dwin, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    dxp = dxp.transpose(0, 3, 1, 2)
    H, W = x.shape[2], x.shape[3]
    dx = dxp[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; odd trailing rows/columns are dropped.

    Returns the pooled array and the flat in-window argmax (0..3, row-major,
    first maximum wins).
    """
    N, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    v = x[:, :, : 2 * Ho, : 2 * Wo].reshape(N, C, Ho, 2, Wo, 2)
    v = v.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, 4)
    idx = v.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(v, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(dy, idx, in_shape):
    N, C, H, W = in_shape
    Ho, Wo = dy.shape[2], dy.shape[3]
    onehot = np.zeros((N, C, Ho, Wo, 4))
    np.put_along_axis(onehot, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    onehot = onehot.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(in_shape)
    dx[:, :, : 2 * Ho, : 2 * Wo] = onehot.reshape(N, C, 2 * Ho, 2 * Wo)
    return dx


def rotate_bilinear(vol, angle_rad):
    """Rotate every (H, W) slice of a (D, H, W) array about its centre.

    Inverse mapping with bilinear weights; samples whose source position falls
    outside the slice are zero.
    """
    D, H, W = vol.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64) - cy,
                         np.arange(W, dtype=np.float64) - cx, indexing="ij")
    sy = cy + c * yy - s * xx
    sx = cx + s * yy + c * xx
    inside = (sy >= 0) & (sy <= H - 1) & (sx >= 0) & (sx <= W - 1)
    y0 = np.clip(np.floor(sy).astype(np.intp), 0, H - 1)
    x0 = np.clip(np.floor(sx).astype(np.intp), 0, W - 1)
    fy = sy - y0
    fx = sx - x0
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    out = ((1 - fy) * (1 - fx) * vol[:, y0, x0] + (1 - fy) * fx * vol[:, y0, x1]
           + fy * (1 - fx) * vol[:, y1, x0] + fy * fx * vol[:, y1, x1])
    return np.where(inside, out, 0.0)
