"""Group rational KAN layers: a grouped rational stage followed by a
linear map, plus the two-layer FFN built from them and its MLP twin.

The grouped stage keeps g unique functions instead of one per
input-output edge; each edge's scale is carried by the linear weights.
"""

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .rational import GroupedRational


def grkan_param_count(d_in, d_out, groups, m=3, n=4):
    """Trainable scalars of one GR-KAN layer: coefficients + linear map."""
    if d_in % groups:
        raise ValueError(f"group count {groups} does not divide d_in {d_in}")
    return groups * (m + 1 + n) + d_in * d_out + d_out


def grkan_function_count(groups):
    return groups


def vanilla_kan_function_count(d_in, d_out):
    """One independent edge function per input-output pair."""
    return d_in * d_out


def vanilla_kan_param_count(d_in, d_out, m=3, n=4):
    # per-edge coefficients plus a per-edge scale
    return d_in * d_out * (m + 1 + n + 1)


class GrKanLayer(Module):
    """linear(group_rational(x)) with contiguous channel groups."""

    def __init__(self, d_in, d_out, groups, rng, m=3, n=4, target="gelu-like"):
        super().__init__()
        self.d_in, self.d_out, self.groups = d_in, d_out, groups
        self.rational = GroupedRational(d_in, groups, m, n, target)
        self.linear = Linear(d_in, d_out, rng)

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise T.ShapeError(
                f"GR-KAN layer expects {self.d_in} channels, got {x.shape[-1]}"
            )
        return self.linear(self.rational(x))


class GrKanFfn(Module):
    """Two stacked GR-KAN layers d -> r*d -> d.

    The linear shapes mirror the conventional two-linear MLP feed-forward
    block exactly; the first rational stage starts at the identity fit and
    the second at the gelu fit, so a freshly built GR-KAN FFN behaves like
    the MLP it replaces.
    """

    def __init__(self, dim, rng, hidden_ratio=4, groups=8, m=3, n=4):
        super().__init__()
        hidden = dim * hidden_ratio
        self.dim, self.hidden = dim, hidden
        self.rational1 = GroupedRational(dim, groups, m, n, target="identity")
        self.linear1 = Linear(dim, hidden, rng)
        self.rational2 = GroupedRational(hidden, groups, m, n, target="gelu-like")
        self.linear2 = Linear(hidden, dim, rng)

    def forward(self, x):
        h = self.linear1(self.rational1(x))
        return self.linear2(self.rational2(h))


class MlpFfn(Module):
    """Conventional transformer FFN: linear, gelu, linear."""

    def __init__(self, dim, rng, hidden_ratio=4):
        super().__init__()
        hidden = dim * hidden_ratio
        self.dim, self.hidden = dim, hidden
        self.linear1 = Linear(dim, hidden, rng)
        self.linear2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.linear2(T.gelu(self.linear1(x)))


def make_ffn(kind, dim, rng, hidden_ratio=4, groups=8, m=3, n=4):
    if kind == "mlp":
        return MlpFfn(dim, rng, hidden_ratio)
    if kind == "grkan":
        return GrKanFfn(dim, rng, hidden_ratio, groups, m, n)
    raise ValueError(f"unknown ffn kind {kind!r}")
