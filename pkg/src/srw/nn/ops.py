"""Layer primitives with hand-written backward passes.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache. Activations are NHWC.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def same_padding(kernel):
    """(before, after) padding that keeps spatial size for a stride-1 kernel."""
    total = kernel - 1
    return total // 2, total - total // 2


def _im2col(x, kernel, pad):
    lo, hi = pad
    xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
    win = sliding_window_view(xp, (kernel, kernel), axis=(1, 2))
    n, h, w, c = win.shape[:4]
    # (N, H, W, C, kh, kw) -> rows ordered (kh, kw, C) to match weight layout
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(n * h * w, kernel * kernel * c), (n, h, w)


def conv2d_forward(x, w, b=None):
    """Stride-1 'same' convolution. ``w`` has shape (k, k, C_in, C_out)."""
    k = w.shape[0]
    pad = same_padding(k)
    cols, (n, h, wd) = _im2col(x, k, pad)
    out = cols @ w.reshape(-1, w.shape[3])
    if b is not None:
        out += b
    return out.reshape(n, h, wd, w.shape[3]), (cols, x.shape, w)


def conv2d_backward(dout, cache, need_dx=True):
    cols, x_shape, w = cache
    k, _, c_in, c_out = w.shape
    d2 = dout.reshape(-1, c_out)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # input gradient = full correlation with the 180-degree rotated kernel
    lo, hi = same_padding(k)
    w_rot = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, c_in)
    dcols, _ = _im2col(dout, k, (hi, lo))
    dx = (dcols @ w_rot).reshape(x_shape)
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      momentum=0.1, eps=1e-5):
    """Per-channel batch norm over (N, H, W).

    In train mode the updated running statistics are returned through the
    cache instead of being written in place.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[-1]
        unbiased = var * count / max(count - 1, 1)
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * unbiased
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, train, new_mean, new_var)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train, _, _ = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    m = dout.size // dout.shape[-1]
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes)
                          - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool2_forward(x):
    """2x2 max pool, stride 2. Spatial dims must be even."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, x_shape = cache
    n, h, w, c = x_shape
    dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dwin.reshape(x_shape)


def gap_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def gap_backward(dout, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), x_shape).copy()


def dense_forward(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dprob, prob):
    """Gradient w.r.t. logits given the gradient w.r.t. softmax output."""
    return prob * (dprob - (dprob * prob).sum(axis=-1, keepdims=True))
