"""Forward/backward primitives on channels-last (N, H, W, C) arrays.

Convolution is direct (spatial domain, no FFT), lowered to a single matrix
product over receptive-field windows so summation order is fixed per layer.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5


def _tap(xp, i, j, stride, ho, wo):
    return xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]


def _windows(xp, k, stride):
    """Receptive fields as rows of a (N * Ho * Wo, k * k * C_in) matrix,
    ordered (kh, kw, C_in) to match :func:`_filters`."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1), (n, ho, wo)


def _filters(w):
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def conv_forward(x, w, stride=1):
    """``w`` has shape (C_out, C_in, k, k); padding is ``k // 2`` ("same" at stride 1).

    Direct spatial convolution: every output pixel is the dot product of its
    receptive field with each filter, done as one matrix product per layer.
    """
    cin = x.shape[-1]
    cout, wcin, k, _ = w.shape
    if wcin != cin:
        raise ValueError(f"conv expects {wcin} input channels, got {cin}")
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols, (n, ho, wo) = _windows(xp, k, stride)
    out = cols @ _filters(w).T
    return out.reshape(n, ho, wo, cout), (xp, x.shape, stride)


def conv_backward(g, w, cache):
    xp, xshape, stride = cache
    n, h, wd, cin = xshape
    cout, _, k, _ = w.shape
    pad = k // 2
    _, ho, wo, _ = g.shape
    g2 = g.reshape(-1, cout)
    cols, _ = _windows(xp, k, stride)
    dw = (g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
    dcols = (g2 @ _filters(w)).reshape(n, ho, wo, k, k, cin)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            _tap(dxp, i, j, stride, ho, wo)[...] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
    return dx, dw


def bn_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.1):
    """Batch norm over (N, H, W). In training mode the running buffers are
    updated in place; evaluation uses them unchanged."""
    if train:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        m = x.shape[0] * x.shape[1] * x.shape[2]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, train)


def bn_backward(g, gamma, cache):
    xhat, inv_std, train = cache
    dgamma = (g * xhat).sum(axis=(0, 1, 2))
    dbeta = g.sum(axis=(0, 1, 2))
    dxhat = g * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    m = g.shape[0] * g.shape[1] * g.shape[2]
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2))
                          - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
    return dx, dgamma, dbeta


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, out > 0


def relu_backward(g, mask):
    return g * mask


def add_forward(a, b):
    """Sum of two tensors; the narrower one is zero-padded on the channel axis."""
    ca, cb = a.shape[-1], b.shape[-1]
    if ca == cb:
        return a + b, (ca, cb)
    if ca > cb:
        out = a.copy()
        out[..., :cb] += b
    else:
        out = b.copy()
        out[..., :ca] += a
    return out, (ca, cb)


def add_backward(g, cache):
    ca, cb = cache
    return g[..., :ca], g[..., :cb]


def concat_forward(xs):
    return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]


def concat_backward(g, sizes):
    return np.split(g, np.cumsum(sizes)[:-1], axis=-1)


def global_pool_forward(x):
    return x.mean(axis=(1, 2), keepdims=True), x.shape


def global_pool_backward(g, shape):
    n, h, w, c = shape
    return np.broadcast_to(g / (h * w), shape).copy()


def avg_pool_forward(x, k, stride):
    n, h, w, c = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, ho, wo, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += _tap(x, i, j, stride, ho, wo)
    return out / (k * k), (x.shape, k, stride)


def avg_pool_backward(g, cache):
    shape, k, stride = cache
    _, ho, wo, _ = g.shape
    dx = np.zeros(shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            _tap(dx, i, j, stride, ho, wo)[...] += g / (k * k)
    return dx


def fc_forward(x, w, b):
    n = x.shape[0]
    x2 = x.reshape(n, -1)
    return (x2 @ w.T + b).reshape(n, 1, 1, -1), x2


def fc_backward(g, w, x2, xshape):
    g2 = g.reshape(g.shape[0], -1)
    return (g2 @ w).reshape(xshape), g2.T @ x2, g2.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n
