"""Forward/backward primitives for the segmentation network.

Activations are channel-last ``(N, H, W, C)`` internally and convolution
weights are ``(k, k, C_in, C_out)``. A convolution is one im2col product
``(N*H*W, k*k*C_in) @ (k*k*C_in, C_out)`` whose result is already in layout.
Its input gradient is the convolution of the upstream gradient with the
spatially flipped, channel-transposed kernel, which keeps the im2col on the
(usually narrower) output side.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k):
    n, h, w, c = x.shape
    if k == 1:
        return x.reshape(n * h * w, c)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N, H, W, C, k, k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv_forward(x, weight, bias=None):
    """Stride-1 'same' cross-correlation with zero padding; odd kernel side."""
    k, _, c, o = weight.shape
    if x.shape[3] != c:
        raise ValueError(f"conv expects {c} input channels, got {x.shape[3]}")
    n, h, w, _ = x.shape
    cols = im2col(x, k)
    out = cols @ weight.reshape(k * k * c, o)
    if bias is not None:
        out += bias
    return out.reshape(n, h, w, o), (cols, x.shape, weight)


def conv_backward(dout, cache, need_dx=True):
    cols, xshape, weight = cache
    k, _, c, o = weight.shape
    d2 = dout.reshape(-1, o)
    dw = (cols.T @ d2).reshape(weight.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    flipped = np.ascontiguousarray(weight[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(k * k * o, c)
    dx = (im2col(dout, k) @ flipped).reshape(xshape)
    return dx, dw, db


def bn_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Batch norm over (N, H, W) per channel. In train mode the batch
    statistics are used and the running stats updated in place (running
    variance with the unbiased estimate)."""
    c = x.shape[-1]
    if train:
        flat = x.reshape(-1, c)
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        m = flat.shape[0]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, train)


def bn_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    c = dout.shape[-1]
    d = dout.reshape(-1, c)
    xh = xhat.reshape(-1, c)
    dbeta = d.sum(axis=0)
    dgamma = (d * xh).sum(axis=0)
    if train:
        m = d.shape[0]
        dx = (gamma * inv_std / m) * (m * d - dbeta - xh * dgamma)
    else:
        dx = (gamma * inv_std) * d
    return dx.reshape(dout.shape), dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return np.maximum(x, 0), mask


def relu_backward(dout, mask):
    return dout * mask


def _windows(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)


def maxpool_forward(x):
    """2x2 max pool, stride 2. Ties route to the first element in raster order."""
    win = _windows(x)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool_backward(dout, cache):
    idx, xshape = cache
    n, h, w, c = xshape
    dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(xshape)


def upsample_forward(x):
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def scse_forward(x, w1, b1, w2, b2, ws, bs):
    """Concurrent channel and spatial squeeze-and-excitation.

    channel gate: sigmoid(w2 @ relu(w1 @ gap(x) + b1) + b2), one per (N, C)
    spatial gate: sigmoid(x . ws + bs), one per (N, H, W)
    out = channel_gate * x + spatial_gate * x
    """
    gap = x.mean(axis=(1, 2))
    z1 = gap @ w1.T + b1
    a1 = np.maximum(z1, 0)
    gc = sigmoid(a1 @ w2.T + b2)
    gs = sigmoid(x @ ws + bs[0])
    out = gc[:, None, None, :] * x + gs[..., None] * x
    return out, (x, gap, z1, a1, gc, gs, w1, w2, ws)


def scse_backward(dout, cache):
    x, gap, z1, a1, gc, gs, w1, w2, ws = cache
    n, h, w, c = x.shape
    dx = dout * (gc[:, None, None, :] + gs[..., None])
    dx_x = dout * x
    # channel path
    dgc = dx_x.sum(axis=(1, 2))
    dz2 = dgc * gc * (1 - gc)
    dw2 = dz2.T @ a1
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ w2) * (z1 > 0)
    dw1 = dz1.T @ gap
    db1 = dz1.sum(axis=0)
    dx += (dz1 @ w1)[:, None, None, :] / (h * w)
    # spatial path
    dgs = dx_x.sum(axis=3)
    dzs = dgs * gs * (1 - gs)
    dws = dzs.reshape(-1) @ x.reshape(-1, c)
    dbs = np.array([dzs.sum()], dtype=x.dtype)
    dx += dzs[..., None] * ws
    return dx, {"fc1.weight": dw1, "fc1.bias": db1, "fc2.weight": dw2, "fc2.bias": db2,
                "spatial.weight": dws, "spatial.bias": dbs}
