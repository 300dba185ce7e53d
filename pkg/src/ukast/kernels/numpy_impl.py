"""Pure-numpy implementations of the hot kernels.

Vectorized per channel group; several full passes over the data where the
numba path fuses everything into one.
"""

import numpy as np


def _split(x, n_groups):
    gsize = x.shape[1] // n_groups
    for k in range(n_groups):
        yield k, slice(k * gsize, (k + 1) * gsize)


def pau_forward(x, a, b):
    """Grouped safe rational activation P(x) / (1 + |Q(x)|).

    x: [rows, channels], a: [g, m+1], b: [g, n]; channels are split into g
    contiguous groups that share coefficients. Q has no constant term.
    """
    out = np.empty_like(x)
    for k, sl in _split(x, a.shape[0]):
        xs = x[:, sl]
        p = np.full_like(xs, a[k, -1])
        for j in range(a.shape[1] - 2, -1, -1):
            p = p * xs + a[k, j]
        q = np.full_like(xs, b[k, -1])
        for j in range(b.shape[1] - 2, -1, -1):
            q = q * xs + b[k, j]
        q = q * xs
        out[:, sl] = p / (1.0 + np.abs(q))
    return out


def pau_backward(x, a, b, grad_out):
    """Gradients of pau_forward wrt x and the coefficient tables.

    Coefficient grads are accumulated in float64 regardless of input dtype
    (long sums in float32 lose too much precision), then cast back.
    sign(0) = 0 at the |Q| kink.
    """
    dx = np.empty_like(x)
    da = np.zeros(a.shape, dtype=np.float64)
    db = np.zeros(b.shape, dtype=np.float64)
    for k, sl in _split(x, a.shape[0]):
        xs = x[:, sl]
        g = grad_out[:, sl]
        p = np.full_like(xs, a[k, -1])
        dp = np.zeros_like(xs)
        for j in range(a.shape[1] - 2, -1, -1):
            dp = dp * xs + p
            p = p * xs + a[k, j]
        q = np.full_like(xs, b[k, -1])
        dq = np.zeros_like(xs)
        for j in range(b.shape[1] - 2, -1, -1):
            dq = dq * xs + q
            q = q * xs + b[k, j]
        dq = dq * xs + q
        q = q * xs
        s = np.sign(q)
        den = 1.0 + np.abs(q)
        dx[:, sl] = g * (dp * den - p * s * dq) / (den * den)
        gp = g / den
        gq = -g * p * s / (den * den)
        pw = np.ones_like(xs)
        for j in range(a.shape[1]):
            da[k, j] = np.sum(gp * pw, dtype=np.float64)
            pw = pw * xs
        pw = xs
        for j in range(b.shape[1]):
            db[k, j] = np.sum(gq * pw, dtype=np.float64)
            pw = pw * xs
    return dx, da.astype(x.dtype), db.astype(x.dtype)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """Decoupled-weight-decay Adam step, in place on flat views."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    if weight_decay != 0.0:
        p *= 1.0 - lr * weight_decay
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
