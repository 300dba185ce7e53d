"""Brute-force oracles shared by the attention tests and the acceptance
suite. Deliberately loop-based and independent of the library's vectorized
paths."""

import numpy as np


def oracle_attention(tokens, attn, allowed=None):
    """Multi-head attention over one token set: tokens [t, c] float64;
    allowed [t, t] bool restricts which pairs may attend."""
    t, c = tokens.shape
    heads, hd = attn.heads, attn.head_dim
    qkv = tokens @ attn.qkv.weight.data + attn.qkv.bias.data
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    out = np.zeros((t, c))
    if attn.rel_bias is not None:
        bias = attn.rel_bias.data[attn._rel_index].reshape(t, t, heads)
    for h in range(heads):
        qh = q[:, h * hd:(h + 1) * hd]
        kh = k[:, h * hd:(h + 1) * hd]
        vh = v[:, h * hd:(h + 1) * hd]
        logits = qh @ kh.T * attn.scale
        if attn.rel_bias is not None:
            logits = logits + bias[:, :, h]
        if allowed is not None:
            logits = np.where(allowed, logits, -np.inf)
        logits = logits - logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=1, keepdims=True)
        out[:, h * hd:(h + 1) * hd] = weights @ vh
    return out @ attn.proj.weight.data + attn.proj.bias.data


def oracle_windowed(grid, attn):
    """Loop implementation of (shifted) window attention on [h, w, c].

    After the cyclic shift, post-shift row r holds pre-shift row r+s;
    it wrapped around iff r+s >= h. Tokens may attend only when their
    wrap flags agree on both axes."""
    h, w, c = grid.shape
    m = attn.window
    s = attn.shift
    x = np.roll(grid, (-s, -s), axis=(0, 1)) if s else grid.copy()
    out = np.zeros_like(x)
    for wi in range(h // m):
        for wj in range(w // m):
            sl = (slice(wi * m, (wi + 1) * m), slice(wj * m, (wj + 1) * m))
            tokens = x[sl].reshape(m * m, c)
            allowed = None
            if s:
                rows = np.arange(wi * m, (wi + 1) * m)
                cols = np.arange(wj * m, (wj + 1) * m)
                fr = np.repeat((rows + s) >= h, m)
                fc = np.tile((cols + s) >= w, m)
                allowed = (fr[:, None] == fr[None, :]) & (fc[:, None] == fc[None, :])
            res = oracle_attention(tokens, attn, allowed)
            out[sl] = res.reshape(m, m, c)
    return np.roll(out, (s, s), axis=(0, 1)) if s else out
