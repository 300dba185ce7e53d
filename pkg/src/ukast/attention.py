"""Spatial machinery: patch embedding, window partition/reverse, windowed
multi-head self-attention with optional cyclic shift and cross-region
masking, and 2x2 patch merging.

Token grids are [N, H, W, C] tensors. Grids that do not divide the window
are zero-padded bottom/right; padded tokens are masked out of attention
and stripped again afterwards.
"""

import numpy as np

from . import tensor as T
from .nn import Linear, LayerNorm, Module, trunc_normal
from .tensor import Tensor

MASK_VALUE = -1e9  # -inf surrogate keeps gradients finite


def window_partition(x, window):
    """[N, H, W, C] -> [N*nw, window*window, C], windows row-major."""
    n, h, w, c = x.shape
    if h % window or w % window:
        raise T.ShapeError(f"grid {h}x{w} is not divisible by window {window}")
    x = T.reshape(x, (n, h // window, window, w // window, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (-1, window * window, c))


def window_reverse(windows, window, n, h, w):
    """Inverse of window_partition."""
    c = windows.shape[-1]
    x = T.reshape(windows, (n, h // window, w // window, window, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, h, w, c))


def _np_window_partition(arr, window):
    h, w = arr.shape
    a = arr.reshape(h // window, window, w // window, window)
    return a.transpose(0, 2, 1, 3).reshape(-1, window * window)


def attention_bias(height, width, window, shift, valid_h=None, valid_w=None):
    """Additive attention bias [nw, T, T] for one padded token grid.

    Region ids are assigned in post-shift coordinates: the strips that
    wrapped around during the cyclic shift get their own ids, and padded
    tokens a dedicated one. Pairs with differing ids receive MASK_VALUE.
    Returns None when nothing needs masking.
    """
    valid_h = height if valid_h is None else valid_h
    valid_w = width if valid_w is None else valid_w
    if shift == 0 and valid_h == height and valid_w == width:
        return None
    ids = np.zeros((height, width), dtype=np.int64)
    if shift > 0:
        region = 1
        h_slices = (slice(0, height - window), slice(height - window, height - shift),
                    slice(height - shift, height))
        w_slices = (slice(0, width - window), slice(width - window, width - shift),
                    slice(width - shift, width))
        for hs in h_slices:
            for ws in w_slices:
                ids[hs, ws] = region
                region += 1
    valid = np.zeros((height, width), dtype=bool)
    valid[:valid_h, :valid_w] = True
    if shift > 0:
        valid = np.roll(valid, (-shift, -shift), axis=(0, 1))
    ids[~valid] = -1
    win_ids = _np_window_partition(ids, window)
    mask = np.where(win_ids[:, :, None] != win_ids[:, None, :], MASK_VALUE, 0.0)
    return mask.astype(np.float32)


class PatchEmbed(Module):
    """Non-overlapping patches flattened and linearly projected.

    Input [N, C, H, W] is zero-padded bottom/right to patch multiples;
    output tokens [N, Ht, Wt, embed] are row-major.
    """

    def __init__(self, patch, in_channels, embed, rng):
        super().__init__()
        self.patch = tuple(patch)
        self.in_channels = in_channels
        self.embed = embed
        self.proj = Linear(in_channels * patch[0] * patch[1], embed, rng)

    def grid_shape(self, h, w):
        ph, pw = self.patch
        return (h + ph - 1) // ph, (w + pw - 1) // pw

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise T.ShapeError(
                f"patch embed expects {self.in_channels} channels, got {c}"
            )
        ph, pw = self.patch
        ht, wt = self.grid_shape(h, w)
        if ht * ph != h or wt * pw != w:
            x = T.pad(x, ((0, 0), (0, 0), (0, ht * ph - h), (0, wt * pw - w)))
        x = T.reshape(x, (n, c, ht, ph, wt, pw))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (n, ht, wt, c * ph * pw))
        return self.proj(x)


class WindowAttention(Module):
    """Multi-head self-attention inside (optionally shifted) windows with a
    learned relative-position bias shared across windows."""

    def __init__(self, dim, heads, window, rng, shifted=False, rel_bias=True):
        """window=None attends globally over the whole grid (no shift, no
        relative bias: the bias table is window-sized)."""
        super().__init__()
        if dim % heads:
            raise T.ShapeError(f"embed dim {dim} not divisible by {heads} heads")
        if window is None and (shifted or rel_bias):
            raise ValueError("global attention supports neither shift nor relative bias")
        self.dim, self.heads, self.window = dim, heads, window
        self.shifted = shifted
        self.shift = window // 2 if shifted else 0
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        if rel_bias:
            span = 2 * window - 1
            self.rel_bias = Tensor(
                trunc_normal(rng, (span * span, heads)), requires_grad=True
            )
            coords = np.stack(
                np.meshgrid(np.arange(window), np.arange(window), indexing="ij"), -1
            ).reshape(-1, 2)
            rel = coords[:, None, :] - coords[None, :, :] + window - 1
            self._rel_index = (rel[..., 0] * span + rel[..., 1]).reshape(-1)
        else:
            self.rel_bias = None

    def forward(self, x):
        n, h, w, c = x.shape
        m = self.window
        if m is None:
            # one global window over the whole grid
            hp, wp, bias = h, w, None
            wins = T.reshape(x, (n, h * w, c))
            nw, t = 1, h * w
        else:
            hp = ((h + m - 1) // m) * m
            wp = ((w + m - 1) // m) * m
            if (hp, wp) != (h, w):
                x = T.pad(x, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
            bias = attention_bias(hp, wp, m, self.shift, h, w)
            if self.shift:
                x = T.roll(x, (-self.shift, -self.shift), axes=(1, 2))
            wins = window_partition(x, m)  # [n*nw, t, c]
            nw = wins.shape[0] // n
            t = m * m
        qkv = self.qkv(wins)
        qkv = T.reshape(qkv, (-1, t, 3, self.heads, self.head_dim))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.scale)
        if self.rel_bias is not None:
            table = T.gather(self.rel_bias, self._rel_index, axis=0)  # [t*t, heads]
            table = T.transpose(T.reshape(table, (t, t, self.heads)), (2, 0, 1))
            attn = T.add(attn, table)
        if bias is not None:
            attn = T.reshape(attn, (n, nw, self.heads, t, t))
            attn = T.add(attn, Tensor(bias[None, :, None]))
            attn = T.reshape(attn, (n * nw, self.heads, t, t))
        attn = T.softmax(attn, axis=-1)
        out = T.matmul(attn, v)  # [n*nw, heads, t, head_dim]
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (-1, t, c))
        out = self.proj(out)
        if m is None:
            return T.reshape(out, (n, h, w, c))
        x = window_reverse(out, m, n, hp, wp)
        if self.shift:
            x = T.roll(x, (self.shift, self.shift), axes=(1, 2))
        if (hp, wp) != (h, w):
            x = x[:, :h, :w, :]
        return x


class PatchMerge(Module):
    """2x2 neighborhood concat (4C), layer norm, linear reduction to 2C."""

    def __init__(self, dim, rng):
        super().__init__()
        self.dim = dim
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            x = T.pad(x, ((0, 0), (0, h % 2), (0, w % 2), (0, 0)))
            h, w = h + h % 2, w + w % 2
        x = T.reshape(x, (n, h // 2, 2, w // 2, 2, c))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (n, h // 2, w // 2, 4 * c))
        return self.reduce(self.norm(x))
