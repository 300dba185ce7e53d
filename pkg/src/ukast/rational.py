"""Safe rational activation: phi(x) = w * P(x) / (1 + |Q(x)|).

P has a constant term (orders 0..m), Q deliberately does not (orders
1..n), so the denominator is >= 1 for every real x and phi(0) = w * a0
exactly. Default orders m=3, n=4.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor


@dataclass
class RationalParams:
    a: np.ndarray  # numerator coefficients, length m+1
    b: np.ndarray  # denominator coefficients, length n (no constant term)
    w: float = 1.0
    fit_residual: float | None = field(default=None, compare=False)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.ndim != 1 or self.b.ndim != 1:
            raise ValueError("coefficient vectors must be one-dimensional")

    @property
    def m(self):
        return len(self.a) - 1

    @property
    def n(self):
        return len(self.b)


def identity_params(m=3, n=4):
    a = np.zeros(m + 1)
    a[1] = 1.0
    return RationalParams(a, np.zeros(n), 1.0, fit_residual=0.0)


def poly_p(x, a):
    """Horner evaluation of a0 + a1 x + ... + am x^m."""
    acc = np.full_like(x, a[-1])
    for j in range(len(a) - 2, -1, -1):
        acc = acc * x + a[j]
    return acc


def poly_q(x, b):
    """Horner evaluation of b1 x + ... + bn x^n."""
    acc = np.full_like(x, b[-1])
    for j in range(len(b) - 2, -1, -1):
        acc = acc * x + b[j]
    return acc * x


def poly_p_naive(x, a):
    return sum(a[j] * x**j for j in range(len(a)))


def poly_q_naive(x, b):
    return sum(b[j] * x ** (j + 1) for j in range(len(b)))


def pau_eval(x, p: RationalParams):
    """Numpy evaluation of phi(x); inputs must be finite."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        bad = int(np.flatnonzero(~np.isfinite(x.reshape(-1)))[0])
        raise FloatingPointError(f"non-finite input to rational activation at flat index {bad}")
    # scale applied to the finished ratio so w-scaling is exact
    return p.w * (poly_p(x, p.a) / (1.0 + np.abs(poly_q(x, p.b))))


def pau_forward(x, p: RationalParams):
    """phi(x) elementwise; Tensor in -> Tensor out (tape-recorded)."""
    if isinstance(x, Tensor):
        a = Tensor(p.a[None, :], dtype=x.dtype)
        b = Tensor(p.b[None, :], dtype=x.dtype)
        lead = x.shape
        y = T.rational_op(T.reshape(x, (-1, 1)), a, b)
        return T.mul(T.reshape(y, lead), float(p.w))
    return pau_eval(x, p)


def pau_backward(x, p: RationalParams):
    """Analytic per-point derivatives (dphi/dx, dphi/da, dphi/db, dphi/dw).

    Shapes: x flattened to N points -> dx [N], da [N, m+1], db [N, n],
    dw [N]. sign(0) = 0 at the |Q| kink.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    P = poly_p(x, p.a)
    Q = poly_q(x, p.b)
    dP = np.zeros_like(x)
    acc = np.full_like(x, p.a[-1])
    for j in range(len(p.a) - 2, -1, -1):
        dP = dP * x + acc
        acc = acc * x + p.a[j]
    dQ = np.zeros_like(x)
    acc = np.full_like(x, p.b[-1])
    for j in range(len(p.b) - 2, -1, -1):
        dQ = dQ * x + acc
        acc = acc * x + p.b[j]
    dQ = dQ * x + acc
    s = np.sign(Q)
    den = 1.0 + np.abs(Q)
    dx = p.w * (dP * den - P * s * dQ) / (den * den)
    powers = np.stack([x**j for j in range(len(p.a))], axis=1)
    da = p.w * powers / den[:, None]
    qpowers = np.stack([x ** (j + 1) for j in range(len(p.b))], axis=1)
    db = -p.w * (P * s / (den * den))[:, None] * qpowers
    dw = P / den
    return dx, da, db, dw


def gelu_reference(x):
    """tanh-approximation gelu, the fit target for FFN-equivalent init."""
    x = np.asarray(x, dtype=np.float64)
    c = 0.7978845608028654
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


_TARGETS = {
    "identity": lambda x: np.asarray(x, dtype=np.float64),
    "gelu-like": gelu_reference,
}


@functools.lru_cache(maxsize=32)
def _fit_cached(target, lo, hi, samples, m, n):
    fn = _TARGETS[target]
    x = np.linspace(lo, hi, samples)
    t = fn(x)
    vander = np.stack([x**j for j in range(m + 1)], axis=1)
    try:
        a0, *_ = np.linalg.lstsq(vander, t, rcond=None)
    except np.linalg.LinAlgError:
        warnings.warn(
            f"rational fit for {target!r} hit singular normal equations; "
            "falling back to the identity configuration"
        )
        p = identity_params(m, n)
        p.fit_residual = float(np.max(np.abs(x - t)))
        return p
    resid0 = float(np.max(np.abs(vander @ a0 - t)))
    if n == 0 or resid0 < 1e-8:
        return RationalParams(a0, np.zeros(n), 1.0, fit_residual=resid0)

    # joint refinement of (a, b) by Adam on the sampled squared error;
    # b starts away from 0 because the |Q| subgradient vanishes there
    a = a0.copy()
    b = np.full(n, 0.05)
    ma = np.zeros_like(a)
    va = np.zeros_like(a)
    mb = np.zeros_like(b)
    vb = np.zeros_like(b)
    beta1, beta2, eps, lr0 = 0.9, 0.999, 1e-8, 2e-2
    steps = 4000
    params = RationalParams(a, b, 1.0)
    for step in range(1, steps + 1):
        params.a, params.b = a, b
        f = pau_eval(x, params)
        err = f - t
        _, da, db, _ = pau_backward(x, params)
        ga = 2.0 * (err[:, None] * da).mean(axis=0)
        gb = 2.0 * (err[:, None] * db).mean(axis=0)
        lr = lr0 * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / steps))
        ma = beta1 * ma + (1 - beta1) * ga
        va = beta2 * va + (1 - beta2) * ga * ga
        mb = beta1 * mb + (1 - beta1) * gb
        vb = beta2 * vb + (1 - beta2) * gb * gb
        c1 = 1 - beta1**step
        c2 = 1 - beta2**step
        a = a - lr * (ma / c1) / (np.sqrt(va / c2) + eps)
        b = b - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
    params = RationalParams(a, b, 1.0)
    resid = float(np.max(np.abs(pau_eval(x, params) - t)))
    if resid > resid0:
        # refinement never made it past the plain polynomial; keep the LS fit
        params = RationalParams(a0, np.zeros(n), 1.0)
        resid = resid0
    params.fit_residual = resid
    return params


def fit_init(target, domain=(-3.0, 3.0), samples=512, m=3, n=4):
    """Least-squares fit of F(x) to a named target on a uniform grid.

    Returns RationalParams with w = 1 and the achieved max-abs deviation
    in ``fit_residual``.
    """
    if target not in _TARGETS:
        raise ValueError(f"unknown fit target {target!r}; expected one of {sorted(_TARGETS)}")
    if samples < 10 * (m + n + 1):
        raise ValueError(
            f"underdetermined fit: {samples} samples for {m + n + 1} coefficients "
            f"(need at least {10 * (m + n + 1)})"
        )
    p = _fit_cached(target, float(domain[0]), float(domain[1]), int(samples), m, n)
    return RationalParams(p.a.copy(), p.b.copy(), p.w, fit_residual=p.fit_residual)


# a coefficient vector with Q identically zero never receives gradient
# (sign(0) = 0), so trainable layers start denominators just off the kink
GRAD_SEED = 1e-6


def _live(b):
    b = np.asarray(b, dtype=np.float64)
    if np.all(b == 0.0):
        return np.full_like(b, GRAD_SEED)
    return b


class RationalActivation(Module):
    """Trainable safe rational unit: one shared function plus a scale w."""

    def __init__(self, m=3, n=4, target="gelu-like"):
        super().__init__()
        p = fit_init(target, m=m, n=n)
        self.m, self.n = m, n
        self.a = Tensor(p.a[None, :].astype(np.float32), requires_grad=True)
        self.b = Tensor(_live(p.b)[None, :].astype(np.float32), requires_grad=True)
        self.w = Tensor(np.ones((), np.float32), requires_grad=True)

    def forward(self, x):
        lead = x.shape
        y = T.rational_op(T.reshape(x, (-1, 1)), self.a, self.b)
        return T.mul(T.reshape(y, lead), self.w)


class GroupedRational(Module):
    """g rational functions shared over contiguous channel groups, w = 1
    (the per-edge scale lives in the following linear map)."""

    def __init__(self, channels, groups, m=3, n=4, target="gelu-like"):
        super().__init__()
        if channels % groups:
            raise ValueError(f"group count {groups} does not divide channels {channels}")
        p = fit_init(target, m=m, n=n)
        self.channels, self.groups, self.m, self.n = channels, groups, m, n
        self.a = Tensor(np.tile(p.a, (groups, 1)).astype(np.float32), requires_grad=True)
        self.b = Tensor(np.tile(_live(p.b), (groups, 1)).astype(np.float32), requires_grad=True)

    def forward(self, x):
        return T.rational_op(x, self.a, self.b)

    # checkpoint layout: one a/b pair per group, named g0, g1, ...
    def state_arrays(self, prefix=""):
        out = {}
        for k in range(self.groups):
            out[f"{prefix}g{k}.a"] = self.a.data[k]
            out[f"{prefix}g{k}.b"] = self.b.data[k]
        return out

    def load_state_arrays(self, arrays, prefix=""):
        for k in range(self.groups):
            for attr, t in (("a", self.a), ("b", self.b)):
                key = f"{prefix}g{k}.{attr}"
                if key not in arrays:
                    raise KeyError(f"checkpoint manifest mismatch: missing array {key!r}")
                arr = arrays[key]
                if tuple(arr.shape) != (t.data.shape[1],):
                    raise ValueError(
                        f"checkpoint manifest mismatch: {key!r} has shape "
                        f"{tuple(arr.shape)}, expected {(t.data.shape[1],)}"
                    )
                t.data[k] = arr
