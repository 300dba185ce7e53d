"""Parameter and FLOPs accounting via a symbolic walk over the model tree.

No numeric compute happens: shapes are propagated and per-layer costs are
derived from closed-form rules. MACs follow the usual conventions (linear:
positions * d_in * d_out; conv: out_positions * k^2 * C_in * C_out;
attention: the two T^2 * d products per window). Elementwise op costs come
from a versioned table printed with every report.

Reported GFLOPs = (2 * MACs + elementwise ops) / 1e9.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .attention import PatchEmbed, PatchMerge, WindowAttention
from .grkan import GrKanFfn, MlpFfn
from .model import (
    ConvBlock,
    DecoderStage,
    FinalExpand,
    RCBlock,
    SegModel,
    SwinEncoder,
    UpProject,
    VitEncoder,
)
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, InstanceNorm2d, LayerNorm, Linear

COST_TABLE_VERSION = 1

# per-element op costs; the load-bearing table that fixes the FLOPs ordering
ACTIVATION_COSTS = {
    "relu": 1,
    "gelu": 14,  # op-by-op count of the tanh approximation:
    # u = c*(x + 0.044715*x^3): 3 mul + 1 add + 1 mul = 5
    # tanh(u) ~ 7 ops, then 0.5*x*(1+t): 2 mul + 1 add  -> 5 + 7 + 2 = 14
    "softmax-exp": 1,  # exponential per logit; normalization folded in
}
NORM_ELEMWISE = 6  # center, scale, affine mul/add, two moment accumulations

_RATIONAL_RE = re.compile(r"^rational\((\d+),\s*(\d+)\)$")


def activation_cost(kind, element_count):
    """Per-element cost table lookup; rational(m,n) costs m+n+3
    (two Horner chains plus abs, add, divide)."""
    if element_count < 0:
        raise ValueError("element_count must be >= 0")
    if kind in ACTIVATION_COSTS:
        return ACTIVATION_COSTS[kind] * element_count
    match = _RATIONAL_RE.match(kind.replace(" ", ""))
    if match:
        m, n = int(match.group(1)), int(match.group(2))
        return (m + n + 3) * element_count
    raise ValueError(f"unknown activation kind {kind!r}")


@dataclass
class Row:
    name: str
    params: int
    macs: int
    elementwise: int


class CostReport:
    def __init__(self, rows):
        self.rows = rows

    @property
    def params(self):
        return sum(r.params for r in self.rows)

    @property
    def macs(self):
        return sum(r.macs for r in self.rows)

    @property
    def elementwise(self):
        return sum(r.elementwise for r in self.rows)

    @property
    def gflops(self):
        return (2 * self.macs + self.elementwise) / 1e9

    def header_lines(self):
        return [
            f"cost table v{COST_TABLE_VERSION}: "
            f"relu=1 gelu=14 softmax-exp=1 rational(m,n)=m+n+3 norm={NORM_ELEMWISE} per element",
            "gflops = (2*MACs + elementwise ops) / 1e9",
        ]

    def format_text(self):
        lines = ["# " + h for h in self.header_lines()]
        width = max(len(r.name) for r in self.rows) if self.rows else 10
        lines.append(f"{'layer'.ljust(width)}  {'params':>12}  {'macs':>14}  {'elemwise':>12}")
        for r in self.rows:
            lines.append(f"{r.name.ljust(width)}  {r.params:>12}  {r.macs:>14}  {r.elementwise:>12}")
        lines.append(f"{'TOTAL'.ljust(width)}  {self.params:>12}  {self.macs:>14}  {self.elementwise:>12}")
        lines.append(f"gflops {self.gflops:.6f}")
        return "\n".join(lines)

    def format_csv(self):
        lines = ["layer,params,macs,elementwise"]
        for r in self.rows:
            lines.append(f"{r.name},{r.params},{r.macs},{r.elementwise}")
        lines.append(f"TOTAL,{self.params},{self.macs},{self.elementwise}")
        lines.append(f"gflops,{self.gflops:.6f},,")
        return "\n".join(lines)


class _Walker:
    def __init__(self):
        self.rows = []

    def add(self, name, params=0, macs=0, elementwise=0):
        self.rows.append(Row(name, int(params), int(macs), int(elementwise)))

    # --- leaf rules -----------------------------------------------------

    def linear(self, name, layer: Linear, positions):
        params = layer.d_in * layer.d_out + (layer.d_out if layer.bias is not None else 0)
        macs = positions * layer.d_in * layer.d_out
        elem = positions * layer.d_out if layer.bias is not None else 0
        self.add(name, params, macs, elem)

    def norm(self, name, channels, elements):
        self.add(name, 2 * channels, 0, NORM_ELEMWISE * elements)

    def conv(self, name, layer: Conv2d, h, w):
        k = layer.kernel
        out_h, out_w = h + 2 * layer.padding - k + 1, w + 2 * layer.padding - k + 1
        params = k * k * layer.c_in * layer.c_out + (layer.c_out if layer.bias is not None else 0)
        macs = out_h * out_w * k * k * layer.c_in * layer.c_out
        elem = out_h * out_w * layer.c_out if layer.bias is not None else 0
        self.add(name, params, macs, elem)
        return out_h, out_w

    def conv_transpose(self, name, layer: ConvTranspose2d, h, w):
        s = layer.stride
        params = s * s * layer.c_in * layer.c_out + (layer.c_out if layer.bias is not None else 0)
        macs = h * w * s * s * layer.c_in * layer.c_out
        elem = h * s * w * s * layer.c_out if layer.bias is not None else 0
        self.add(name, params, macs, elem)
        return h * s, w * s

    def attention(self, name, attn: WindowAttention, h, w):
        m = attn.window if attn.window is not None else None
        if m is None:
            windows, t = 1, h * w
        else:
            hp = -(-h // m) * m
            wp = -(-w // m) * m
            windows = (hp // m) * (wp // m)
            t = m * m
        positions = windows * t
        self.linear(name + ".qkv", attn.qkv, positions)
        core_macs = windows * attn.heads * 2 * t * t * attn.head_dim
        elem = windows * attn.heads * t * t  # scale multiply
        elem += activation_cost("softmax-exp", windows * attn.heads * t * t)
        params = 0
        if attn.rel_bias is not None:
            span = 2 * attn.window - 1
            params += span * span * attn.heads
            elem += windows * attn.heads * t * t  # bias add
        if attn.shift:
            elem += windows * attn.heads * t * t  # mask add
        self.add(name + ".core", params, core_macs, elem)
        self.linear(name + ".proj", attn.proj, positions)

    def ffn(self, name, ffn, positions):
        if isinstance(ffn, MlpFfn):
            self.linear(name + ".linear1", ffn.linear1, positions)
            self.add(name + ".gelu", 0, 0, activation_cost("gelu", positions * ffn.hidden))
            self.linear(name + ".linear2", ffn.linear2, positions)
        elif isinstance(ffn, GrKanFfn):
            r1, r2 = ffn.rational1, ffn.rational2
            kind1 = f"rational({r1.m},{r1.n})"
            self.add(name + ".rational1", r1.groups * (r1.m + 1 + r1.n), 0,
                     activation_cost(kind1, positions * ffn.dim))
            self.linear(name + ".linear1", ffn.linear1, positions)
            kind2 = f"rational({r2.m},{r2.n})"
            self.add(name + ".rational2", r2.groups * (r2.m + 1 + r2.n), 0,
                     activation_cost(kind2, positions * ffn.hidden))
            self.linear(name + ".linear2", ffn.linear2, positions)
        else:
            raise ValueError(f"complexity: unsupported FFN kind {type(ffn).__name__}")

    def conv_block(self, name, block: ConvBlock, h, w):
        oh, ow = self.conv(name + ".conv", block.conv, h, w)
        channels = block.conv.c_out
        self.norm(name + ".norm", channels, channels * oh * ow)
        self.add(name + ".relu", 0, 0, activation_cost("relu", channels * oh * ow))
        return oh, ow

    def up_project(self, name, up: UpProject, h, w):
        oh, ow = self.conv_transpose(name + ".up", up.up, h, w)
        channels = up.up.c_out
        self.norm(name + ".norm", channels, channels * oh * ow)
        self.add(name + ".relu", 0, 0, activation_cost("relu", channels * oh * ow))
        return oh, ow

    # --- composites -----------------------------------------------------

    def block_pair(self, name, block, h, w):
        dim = block.norm1.dim
        tokens = h * w
        if block.rc is not None:
            self.conv_block(name + ".rc.body", block.rc.body, h, w)
            self.add(name + ".rc.residual", 0, 0, tokens * dim)
        for tag, norm, sub in (
            ("norm1", block.norm1, ("attn", block.attn)),
            ("norm2", block.norm2, ("ffn1", block.ffn1)),
            ("norm3", block.norm3, ("attn_shift", block.attn_shift)),
            ("norm4", block.norm4, ("ffn2", block.ffn2)),
        ):
            self.norm(f"{name}.{tag}", dim, tokens * dim)
            kind, mod = sub
            if isinstance(mod, WindowAttention):
                self.attention(f"{name}.{kind}", mod, h, w)
            else:
                self.ffn(f"{name}.{kind}", mod, tokens)
            self.add(f"{name}.{kind}.residual", 0, 0, tokens * dim)

    def patch_embed(self, name, pe: PatchEmbed, h, w):
        gh, gw = pe.grid_shape(h, w)
        self.linear(name + ".proj", pe.proj, gh * gw)
        return gh, gw

    def swin_encoder(self, enc: SwinEncoder, h, w):
        gh, gw = self.patch_embed("encoder.patch_embed", enc.patch_embed, h, w)
        skip_shapes = []
        for i, blocks in enumerate(enc.stages):
            for j, block in enumerate(blocks):
                self.block_pair(f"encoder.stages.{i}.blocks.{j}", block, gh, gw)
            skip_shapes.append((enc.cfg.embeds[i], gh, gw))
            if i < len(enc.merges):
                merge = enc.merges[i]
                oh, ow = -(-gh // 2), -(-gw // 2)
                self.norm(f"encoder.merges.{i}.norm", 4 * merge.dim, oh * ow * 4 * merge.dim)
                self.linear(f"encoder.merges.{i}.reduce", merge.reduce, oh * ow)
                gh, gw = oh, ow
        return skip_shapes

    def vit_encoder(self, enc: VitEncoder, h, w):
        gh, gw = self.patch_embed("encoder.patch_embed", enc.patch_embed, h, w)
        dim = enc.cfg.embeds[0]
        tokens = gh * gw
        self.add("encoder.pos_emb", tokens * dim, 0, tokens * dim)
        for i, block in enumerate(enc.blocks):
            name = f"encoder.blocks.{i}"
            self.norm(name + ".norm1", dim, tokens * dim)
            self.attention(name + ".attn", block.attn, gh, gw)
            self.add(name + ".attn.residual", 0, 0, tokens * dim)
            self.norm(name + ".norm2", dim, tokens * dim)
            self.ffn(name + ".ffn", block.ffn, tokens)
            self.add(name + ".ffn.residual", 0, 0, tokens * dim)
        self.norm("encoder.norm", dim, tokens * dim)
        skip_shapes = []
        for a, adapter in enumerate(enc.adapters):
            ah, aw = gh, gw
            for s, step in enumerate(adapter):
                ah, aw = self.up_project(f"encoder.adapters.{a}.{s}", step, ah, aw)
            skip_shapes.append((adapter[-1].up.c_out, ah, aw))
        skip_shapes.append((dim, gh, gw))
        return skip_shapes

    def decoder_stage(self, name, stage: DecoderStage, deep_shape, skip_shape):
        c, h, w = deep_shape
        oh, ow = self.conv_transpose(name + ".up", stage.up, h, w)
        ch = stage.up.c_out + skip_shape[0]
        for j, block in enumerate(stage.convs):
            oh, ow = self.conv_block(f"{name}.convs.{j}", block, oh, ow)
            ch = block.conv.c_out
        return ch, oh, ow


def count(model: SegModel, input_shape):
    """Symbolic cost report for one forward pass over input_shape (C, H, W)."""
    c, h, w = input_shape
    if c != model.cfg.in_channels:
        raise ValueError(
            f"input shape has {c} channels, model expects {model.cfg.in_channels}"
        )
    wk = _Walker()
    if isinstance(model.encoder, SwinEncoder):
        skips = wk.swin_encoder(model.encoder, h, w)
    elif isinstance(model.encoder, VitEncoder):
        skips = wk.vit_encoder(model.encoder, h, w)
    else:
        raise ValueError(
            f"complexity: unsupported encoder kind {type(model.encoder).__name__}"
        )
    deep = skips[-1]
    for i, (stage, skip) in enumerate(zip(model.decoder, reversed(skips[:-1]))):
        deep = wk.decoder_stage(f"decoder.{i}", stage, deep, skip)
    ch, fh, fw = deep
    for u, up in enumerate(model.final.ups):
        fh, fw = wk.up_project(f"final.ups.{u}", up, fh, fw)
    for j, block in enumerate(model.final.convs):
        fh, fw = wk.conv_block(f"final.convs.{j}", block, fh, fw)
    wk.conv("head", model.head, fh, fw)
    return CostReport(wk.rows)
