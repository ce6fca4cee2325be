"""Forward/backward pairs for the layer kinds the engine supports.

Activations are NHWC ``float64`` arrays. Convolutions here are
cross-correlations (no kernel flip) with same-size zero padding; weights are
laid out ``(3, 3, c_in, c_out)``.
"""

from __future__ import annotations

import numba
import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

class ShapeError(ValueError):
    pass


@numba.njit(cache=True, fastmath=True)
def _conv_fwd_kernel(x, w, b):
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    y = np.empty((n, h, wd, cout))
    for s in range(n):
        for i in range(h):
            for j in range(wd):
                for o in range(cout):
                    y[s, i, j, o] = b[o]
                for dy in range(3):
                    ii = i + dy - 1
                    if ii < 0 or ii >= h:
                        continue
                    for dx in range(3):
                        jj = j + dx - 1
                        if jj < 0 or jj >= wd:
                            continue
                        for c in range(cin):
                            v = x[s, ii, jj, c]
                            for o in range(cout):
                                y[s, i, j, o] += v * w[dy, dx, c, o]
    return y


@numba.njit(cache=True, fastmath=True)
def _conv_bwd_kernel(x, w, g):
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    dx_ = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(cout)
    for s in range(n):
        for i in range(h):
            for j in range(wd):
                for o in range(cout):
                    db[o] += g[s, i, j, o]
                for dy in range(3):
                    ii = i + dy - 1
                    if ii < 0 or ii >= h:
                        continue
                    for dx in range(3):
                        jj = j + dx - 1
                        if jj < 0 or jj >= wd:
                            continue
                        for c in range(cin):
                            v = x[s, ii, jj, c]
                            acc = 0.0
                            for o in range(cout):
                                go = g[s, i, j, o]
                                dw[dy, dx, c, o] += v * go
                                acc += w[dy, dx, c, o] * go
                            dx_[s, ii, jj, c] += acc
    return dx_, dw, db


def conv3x3_forward(x, w, b):
    """Direct 3x3 cross-correlation, compiled; a pixel loop beats im2col at the narrow widths used here."""
    if x.ndim != 4:
        raise ShapeError(f"conv input must be NHWC, got {x.shape}")
    if w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv weight {w.shape} does not fit input channels {x.shape[3]}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    y = _conv_fwd_kernel(x, w, np.ascontiguousarray(b, dtype=np.float64))
    return y, (x, w)


def conv3x3_backward(dy, cache):
    x, w = cache
    return _conv_bwd_kernel(x, w, np.ascontiguousarray(dy, dtype=np.float64))


def _tap_validity(h: int, w: int):
    # rows[i, y] is 1 when tap row i reads an in-bounds pixel for output row y.
    ys = np.arange(h)
    xs = np.arange(w)
    rows = np.stack([((ys + i - 1) >= 0) & ((ys + i - 1) < h) for i in range(3)]).astype(np.float64)
    cols = np.stack([((xs + j - 1) >= 0) & ((xs + j - 1) < w) for j in range(3)]).astype(np.float64)
    return rows, cols


def const_conv3x3_forward(coeffs, w, h: int, wd: int):
    """Convolution of spatially constant channels (one value per sample and channel).

    Equals :func:`conv3x3_forward` (without bias) on the stretched maps, but
    costs O(h*w*c_out) instead of O(h*w*t*c_out).
    """
    if coeffs.ndim != 2 or w.shape[:2] != (3, 3) or w.shape[2] != coeffs.shape[1]:
        raise ShapeError(f"coefficients {coeffs.shape} do not fit weight {w.shape}")
    rows, cols = _tap_validity(h, wd)
    v = np.tensordot(coeffs, w, axes=([1], [2]))  # (n, 3, 3, cout)
    y = np.einsum("iy,jx,nijo->nyxo", rows, cols, v, optimize=True)
    return y, (coeffs, w, rows, cols)


def const_conv3x3_backward(dy, cache):
    coeffs, w, rows, cols = cache
    g = np.einsum("iy,jx,nyxo->nijo", rows, cols, dy, optimize=True)
    dw = np.tensordot(coeffs, g, axes=([0], [0]))  # (t, 3, 3, cout)
    dw = dw.transpose(1, 2, 0, 3)
    dc = np.tensordot(g, w, axes=([1, 2, 3], [0, 1, 3]))
    return dc, dw


def relu_forward(x):
    mask = x > 0
    return np.maximum(x, 0.0), mask  # NaN propagates


def relu_backward(dy, mask):
    return np.where(mask, dy, 0.0)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool, eps: float = BN_EPS):
    """Per-channel normalisation over all axes but the last.

    Returns ``(y, cache, batch_stats)``; ``batch_stats`` is ``(mean, var)`` in
    training mode and ``None`` at inference.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        count = int(np.prod([x.shape[a] for a in axes]))
        if x.shape[0] < 2:
            raise ShapeError("batchnorm training needs a batch of at least 2")
        mean = x.mean(axis=axes)
        xc = x - mean
        var = (xc * xc).sum(axis=axes) / count
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        return xhat * gamma + beta, (xhat, inv, gamma, axes, count), (mean, var)
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean) * inv
    return xhat * gamma + beta, (xhat, inv, gamma, axes, None), None


def batchnorm_backward(dy, cache):
    xhat, inv, gamma, axes, count = cache
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if count is None:
        return dxhat * inv, dgamma, dbeta
    dx = inv / count * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def update_running(running, batch, momentum: float = BN_MOMENTUM):
    return momentum * running + (1.0 - momentum) * batch


def fc_forward(x, w, b):
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if flat.shape[1] != w.shape[0]:
        raise ShapeError(f"fc expects {w.shape[0]} inputs, got {flat.shape[1]}")
    y = flat @ w + b
    return y.reshape(n, 1, 1, -1), (flat, x.shape, w)


def fc_backward(dy, cache):
    flat, xshape, w = cache
    g = dy.reshape(flat.shape[0], -1)
    return (g @ w.T).reshape(xshape), flat.T @ g, g.sum(axis=0)


def meanpool2_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"mean-pool needs even spatial size, got {h}x{w}")
    y = x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
    return y, x.shape


def meanpool2_backward(dy, xshape):
    up = np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2)
    return up * 0.25


def frobenius_loss(pred, target):
    """Batch mean of the squared Frobenius norm of ``pred - target``, and its gradient."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    n = pred.shape[0]
    diff = pred - target
    return float((diff * diff).sum() / n), 2.0 * diff / n
