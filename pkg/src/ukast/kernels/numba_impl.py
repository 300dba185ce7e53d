"""Numba-jitted fused kernels. Same contracts as numpy_impl.

Loops are blocked per channel group so the inner loop runs over contiguous
memory with the coefficients held in registers. fastmath only reassociates
arithmetic; results stay deterministic run to run on one machine.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def _pau_forward(x, a, b, gsize, out):
    rows, cols = x.shape
    n_groups = a.shape[0]
    m1 = a.shape[1]
    n = b.shape[1]
    for r in range(rows):
        for k in range(n_groups):
            lo = k * gsize
            for c in range(lo, lo + gsize):
                v = x[r, c]
                p = a[k, m1 - 1]
                for j in range(m1 - 2, -1, -1):
                    p = p * v + a[k, j]
                q = b[k, n - 1]
                for j in range(n - 2, -1, -1):
                    q = q * v + b[k, j]
                q = q * v
                out[r, c] = p / (1.0 + abs(q))


@njit(cache=True, fastmath=True)
def _pau_backward(x, a, b, grad_out, dx, da, db):
    rows, cols = x.shape
    n_groups = a.shape[0]
    m1 = a.shape[1]
    n = b.shape[1]
    gsize = cols // n_groups
    for r in range(rows):
        for k in range(n_groups):
            lo = k * gsize
            for c in range(lo, lo + gsize):
                v = x[r, c]
                # Horner for P and P'
                p = a[k, m1 - 1]
                dp = 0.0
                for j in range(m1 - 2, -1, -1):
                    dp = dp * v + p
                    p = p * v + a[k, j]
                # Horner for the no-constant-term Q and Q'
                q = b[k, n - 1]
                dq = 0.0
                for j in range(n - 2, -1, -1):
                    dq = dq * v + q
                    q = q * v + b[k, j]
                dq = dq * v + q
                q = q * v
                s = 1.0 if q > 0.0 else (-1.0 if q < 0.0 else 0.0)
                den = 1.0 + abs(q)
                g = grad_out[r, c]
                dx[r, c] = g * (dp * den - p * s * dq) / (den * den)
                gp = g / den
                gq = -g * p * s / (den * den)
                pw = 1.0
                for j in range(m1):
                    da[k, j] += gp * pw
                    pw *= v
                pw = v
                for j in range(n):
                    db[k, j] += gq * pw
                    pw *= v


def pau_forward(x, a, b):
    out = np.empty_like(x)
    _pau_forward(x, a, b, x.shape[1] // a.shape[0], out)
    return out


def pau_backward(x, a, b, grad_out):
    dx = np.empty_like(x)
    da = np.zeros(a.shape, dtype=np.float64)
    db = np.zeros(b.shape, dtype=np.float64)
    _pau_backward(x, a, b, grad_out, dx, da, db)
    return dx, da.astype(x.dtype), db.astype(x.dtype)


@njit(cache=True, fastmath=True)
def _adamw(p, g, m, v, lr, beta1, beta2, eps, decay_factor, bc1, bc2):
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] = p[i] * decay_factor - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    _adamw(p, g, m, v, lr, beta1, beta2, eps, 1.0 - lr * weight_decay, bc1, bc2)
