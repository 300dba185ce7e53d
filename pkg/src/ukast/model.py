"""Model assembly: swin-style encoder stages built from the five-step
block pair (residual conv, windowed attention, FFN, shifted attention,
FFN), a fixed-resolution transformer encoder alternative, the shared
convolutional decoder with skip connections, and the variant factory
covering the ablation lattice.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .attention import PatchEmbed, PatchMerge, WindowAttention
from .grkan import make_ffn
from .nn import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    InstanceNorm2d,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    trunc_normal,
)
from .tensor import Tensor


def tokens_to_nchw(x):
    return T.transpose(x, (0, 3, 1, 2))


def nchw_to_tokens(x):
    return T.transpose(x, (0, 2, 3, 1))


# ----------------------------------------------------------------------
# configuration


@dataclass
class StageConfig:
    depth: int
    embed: int
    heads: int
    window: int
    ffn_kind: str = "grkan"
    rc_enabled: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("stage depth must be >= 1")
        if self.embed % self.heads:
            raise ValueError(f"embed {self.embed} not divisible by heads {self.heads}")


@dataclass
class ModelConfig:
    encoder: str = "swin"  # swin | vit
    img_size: int = 64
    patch: tuple = (2, 2)
    in_channels: int = 1
    classes: int = 3
    embeds: tuple = (24, 48, 96, 192)
    depths: tuple = (1, 1, 1, 1)
    heads: tuple = (2, 4, 8, 8)
    window: int = 4
    ffn: str = "grkan"  # mlp | grkan
    rc: bool = False
    hidden_ratio: int = 4
    groups: int = 8
    rational_m: int = 3
    rational_n: int = 4
    rel_bias: bool = True
    decoder_blocks_per_stage: int = 2

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        self.embeds = tuple(int(e) for e in self.embeds)
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        if self.encoder not in ("swin", "vit"):
            raise ValueError(f"unknown encoder kind {self.encoder!r}")
        if self.ffn not in ("mlp", "grkan"):
            raise ValueError(f"unknown ffn kind {self.ffn!r}")
        if self.rc and self.encoder == "vit":
            raise ValueError("residual convolutions are only defined for the swin encoder")
        if not (len(self.embeds) == len(self.depths) == len(self.heads)):
            raise ValueError("embeds/depths/heads must have equal lengths")
        if self.encoder == "swin":
            if len(self.embeds) < 2:
                raise ValueError("swin encoder needs at least 2 stages")
            for a, b in zip(self.embeds, self.embeds[1:]):
                if b != 2 * a:
                    raise ValueError("stage widths must double (patch merging doubles channels)")
        else:
            if len(self.embeds) != 1:
                raise ValueError("vit encoder has exactly one resolution / stage entry")
            if self.embeds[0] % 8:
                raise ValueError("vit embed dim must be divisible by 8 for the skip pyramid")
        for e, h in zip(self.embeds, self.heads):
            if e % h:
                raise ValueError(f"embed {e} not divisible by heads {h}")
        if self.ffn == "grkan":
            for e in self.embeds:
                if e % self.groups:
                    raise ValueError(f"groups {self.groups} must divide embed {e}")

    def stage_configs(self):
        return [
            StageConfig(d, e, h, self.window, self.ffn, self.rc)
            for d, e, h in zip(self.depths, self.embeds, self.heads)
        ]

    def pyramid(self):
        """Skip channel widths, shallow to deep."""
        if self.encoder == "swin":
            return list(self.embeds)
        e = self.embeds[0]
        return [e // 8, e // 4, e // 2, e]

    def to_flat(self, prefix="model."):
        flat = {}
        for key, val in asdict(self).items():
            if isinstance(val, tuple):
                flat[prefix + key] = ",".join(str(v) for v in val)
            else:
                flat[prefix + key] = str(val)
        return flat

    @classmethod
    def from_flat(cls, flat, prefix="model."):
        kwargs = {}
        defaults = cls()
        for key, val in flat.items():
            if not key.startswith(prefix):
                continue
            name = key[len(prefix):]
            if not hasattr(defaults, name):
                raise KeyError(f"unknown model config key {key!r}")
            current = getattr(defaults, name)
            if isinstance(current, bool):
                kwargs[name] = val.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                kwargs[name] = int(val)
            elif isinstance(current, tuple):
                kwargs[name] = tuple(int(v) for v in val.split(","))
            else:
                kwargs[name] = val.strip()
        return cls(**kwargs)


# ----------------------------------------------------------------------
# building blocks


class ConvBlock(Module):
    """3x3 conv + norm + relu."""

    def __init__(self, c_in, c_out, rng, norm="batch"):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.norm = BatchNorm2d(c_out) if norm == "batch" else InstanceNorm2d(c_out)

    def forward(self, x):
        return T.relu(self.norm(self.conv(x)))


class RCBlock(Module):
    """Channel-preserving residual convolution on a token grid:
    v0 = z + conv_block(z)."""

    def __init__(self, dim, rng):
        super().__init__()
        self.body = ConvBlock(dim, dim, rng, norm="instance")

    def forward(self, x):
        grid = tokens_to_nchw(x)
        return T.add(x, nchw_to_tokens(self.body(grid)))


class SwinBlockPair(Module):
    """One stage step: optional RC, then
    attn -> ffn -> shifted attn -> ffn, each pre-normed with residual."""

    def __init__(self, cfg: ModelConfig, dim, heads, rng, rc_enabled):
        super().__init__()
        kan = dict(hidden_ratio=cfg.hidden_ratio, groups=cfg.groups,
                   m=cfg.rational_m, n=cfg.rational_n)
        self.rc = RCBlock(dim, rng) if rc_enabled else None
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, cfg.window, rng, shifted=False,
                                    rel_bias=cfg.rel_bias)
        self.norm2 = LayerNorm(dim)
        self.ffn1 = make_ffn(cfg.ffn, dim, rng, **kan)
        self.norm3 = LayerNorm(dim)
        self.attn_shift = WindowAttention(dim, heads, cfg.window, rng, shifted=True,
                                          rel_bias=cfg.rel_bias)
        self.norm4 = LayerNorm(dim)
        self.ffn2 = make_ffn(cfg.ffn, dim, rng, **kan)

    def forward(self, z):
        v0 = self.rc(z) if self.rc is not None else z
        z1h = T.add(self.attn(self.norm1(v0)), v0)
        z1 = T.add(self.ffn1(self.norm2(z1h)), z1h)
        z2h = T.add(self.attn_shift(self.norm3(z1)), z1)
        return T.add(self.ffn2(self.norm4(z2h)), z2h)


class SwinEncoder(Module):
    """Hierarchical encoder; emits one NCHW skip per stage, channels
    doubling and spatial dims halving stage to stage."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch, cfg.in_channels, cfg.embeds[0], rng)
        stages = []
        merges = []
        for i, stage in enumerate(cfg.stage_configs()):
            stages.append(ModuleList(
                SwinBlockPair(cfg, stage.embed, stage.heads, rng, cfg.rc)
                for _ in range(stage.depth)
            ))
            if i < len(cfg.embeds) - 1:
                merges.append(PatchMerge(stage.embed, rng))
        self.stages = ModuleList(stages)
        self.merges = ModuleList(merges)

    def forward(self, image):
        x = self.patch_embed(image)
        skips = []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            skips.append(tokens_to_nchw(x))
            if i < len(self.merges):
                x = self.merges[i](x)
        return skips


class VitBlock(Module):
    """Pre-norm transformer block with global attention."""

    def __init__(self, cfg: ModelConfig, dim, heads, rng):
        super().__init__()
        kan = dict(hidden_ratio=cfg.hidden_ratio, groups=cfg.groups,
                   m=cfg.rational_m, n=cfg.rational_n)
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, None, rng, shifted=False, rel_bias=False)
        self.norm2 = LayerNorm(dim)
        self.ffn = make_ffn(cfg.ffn, dim, rng, **kan)

    def forward(self, z):
        z = T.add(self.attn(self.norm1(z)), z)
        return T.add(self.ffn(self.norm2(z)), z)


class UpProject(Module):
    """Transposed-conv x2 with norm + relu; projects a deep feature to the
    next shallower skip resolution/width."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.up = ConvTranspose2d(c_in, c_out, 2, rng)
        self.norm = InstanceNorm2d(c_out)

    def forward(self, x):
        return T.relu(self.norm(self.up(x)))


class VitEncoder(Module):
    """Fixed-resolution token encoder with learned absolute position
    embeddings; skip features tapped at evenly spaced depths and projected
    to the pyramid the shared decoder expects."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        embed = cfg.embeds[0]
        self.patch_embed = PatchEmbed(cfg.patch, cfg.in_channels, embed, rng)
        gh, gw = self.patch_embed.grid_shape(cfg.img_size, cfg.img_size)
        self.grid = (gh, gw)
        self.pos_emb = Tensor(trunc_normal(rng, (1, gh, gw, embed)), requires_grad=True)
        depth = cfg.depths[0]
        self.blocks = ModuleList(
            VitBlock(cfg, embed, cfg.heads[0], rng) for _ in range(depth)
        )
        self.norm = LayerNorm(embed)
        # taps after these block indices (1-based), evenly spaced
        self.taps = [max(1, -(-depth * (k + 1) // 4)) for k in range(4)]
        chain_specs = [
            (embed, (embed // 2, embed // 4, embed // 8)),
            (embed, (embed // 2, embed // 4)),
            (embed, (embed // 2,)),
        ]
        adapters = []
        for c_in, outs in chain_specs:
            chain = []
            for c_out in outs:
                chain.append(UpProject(c_in, c_out, rng))
                c_in = c_out
            adapters.append(ModuleList(chain))
        self.adapters = ModuleList(adapters)

    def forward(self, image):
        x = self.patch_embed(image)
        if x.shape[1:3] != self.grid:
            raise T.ShapeError(
                f"vit encoder is fixed at grid {self.grid}, got {tuple(x.shape[1:3])}"
            )
        x = T.add(x, self.pos_emb)
        feats = []
        tap_set = set(self.taps)
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in tap_set:
                feats.append(x)
        by_depth = {i: f for i, f in zip(sorted(tap_set), feats)}
        t1, t2, t3, t4 = (by_depth[i] for i in self.taps)
        s4 = tokens_to_nchw(self.norm(t4))
        skips = []
        for adapter, tap in zip(self.adapters, (t1, t2, t3)):
            y = tokens_to_nchw(tap)
            for step in adapter:
                y = step(y)
            skips.append(y)
        return [skips[0], skips[1], skips[2], s4]


class DecoderStage(Module):
    """Deconv x2, concat skip, then conv blocks (3x3 + BatchNorm + ReLU)."""

    def __init__(self, deep_ch, skip_ch, rng, blocks=2):
        super().__init__()
        self.up = ConvTranspose2d(deep_ch, skip_ch, 2, rng)
        convs = [ConvBlock(2 * skip_ch, skip_ch, rng)]
        convs += [ConvBlock(skip_ch, skip_ch, rng) for _ in range(blocks - 1)]
        self.convs = ModuleList(convs)

    def forward(self, deep, skip):
        dh, dw = deep.shape[2], deep.shape[3]
        sh, sw = skip.shape[2], skip.shape[3]
        if (2 * dh, 2 * dw) != (sh, sw):
            raise T.ShapeError(
                f"decoder resolution mismatch: deep {dh}x{dw} must be half of skip {sh}x{sw}"
            )
        x = self.up(deep)
        x = T.concat([x, skip], axis=1)
        for block in self.convs:
            x = block(x)
        return x


class FinalExpand(Module):
    """Upsample from patch resolution back to pixel resolution."""

    def __init__(self, channels, patch, rng, blocks=2):
        super().__init__()
        steps = int(np.log2(patch))
        if 2**steps != patch:
            raise ValueError(f"patch size {patch} must be a power of two")
        self.ups = ModuleList(UpProject(channels, channels, rng) for _ in range(steps))
        self.convs = ModuleList(ConvBlock(channels, channels, rng) for _ in range(blocks))

    def forward(self, x):
        for up in self.ups:
            x = up(x)
        for block in self.convs:
            x = block(x)
        return x


class SegModel(Module):
    """Encoder, hierarchical skips, decoder, 1x1 head."""

    def __init__(self, cfg: ModelConfig, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        if cfg.encoder == "swin":
            self.encoder = SwinEncoder(cfg, rng)
            final_patch = cfg.patch[0]
        else:
            self.encoder = VitEncoder(cfg, rng)
            # the adapter pyramid always ends one halving short of pixels
            final_patch = 2
        pyramid = cfg.pyramid()
        self.decoder = ModuleList(
            DecoderStage(deep, skip, rng, cfg.decoder_blocks_per_stage)
            for deep, skip in zip(pyramid[::-1][:-1], pyramid[::-1][1:])
        )
        self.final = FinalExpand(pyramid[0], final_patch, rng, cfg.decoder_blocks_per_stage)
        self.head = Conv2d(pyramid[0], cfg.classes, 1, rng)

    def forward(self, image):
        if image.shape[1] != self.cfg.in_channels:
            raise T.ShapeError(
                f"model expects {self.cfg.in_channels} input channels, got {image.shape[1]}"
            )
        skips = self.encoder(image)
        x = skips[-1]
        for stage, skip in zip(self.decoder, reversed(skips[:-1])):
            x = stage(x, skip)
        x = self.final(x)
        return self.head(x)


# ----------------------------------------------------------------------
# variant factory

_NAMED_VARIANTS = {
    "ukat": ("vit", "grkan", False),
    "ukast": ("swin", "grkan", True),
}

VARIANT_ROWS = [
    ("vit", "mlp", False),
    ("vit", "grkan", False),
    ("swin", "mlp", False),
    ("swin", "grkan", False),
    ("swin", "mlp", True),
    ("swin", "grkan", True),
]


def parse_variant(name):
    """'swin+grkan+rc' or a named alias -> (encoder, ffn, rc)."""
    key = name.strip().lower()
    if key in _NAMED_VARIANTS:
        return _NAMED_VARIANTS[key]
    parts = key.split("+")
    rc = "rc" in parts
    parts = [p for p in parts if p != "rc"]
    if len(parts) != 2:
        raise ValueError(f"cannot parse variant {name!r}")
    enc, ffn = parts
    return enc, ffn, rc


def variant_name(encoder, ffn, rc):
    return f"{encoder}+{ffn}" + ("+rc" if rc else "")


def make_variant(encoder, ffn, rc=False, scale="desk", in_channels=1, classes=3):
    """Build the ModelConfig for one ablation row or named model."""
    if encoder not in ("vit", "swin"):
        raise ValueError(f"unknown encoder kind {encoder!r}")
    if ffn not in ("mlp", "grkan"):
        raise ValueError(f"unknown ffn kind {ffn!r}")
    if rc and encoder != "swin":
        raise ValueError("rc is only valid with the swin encoder")
    if scale == "desk":
        img = 64
        swin = dict(patch=(2, 2), embeds=(24, 48, 96, 192), depths=(1, 1, 1, 1),
                    heads=(2, 4, 8, 8), window=4)
        vit = dict(patch=(16, 16), embeds=(192,), depths=(4,), heads=(8,), window=4)
    elif scale == "tiny":
        img = 32
        swin = dict(patch=(2, 2), embeds=(16, 32, 64), depths=(1, 1, 1),
                    heads=(2, 4, 4), window=4)
        vit = dict(patch=(16, 16), embeds=(96,), depths=(4,), heads=(4,), window=4)
    else:
        raise ValueError(f"unknown scale {scale!r}")
    dims = swin if encoder == "swin" else vit
    return ModelConfig(
        encoder=encoder, img_size=img, in_channels=in_channels, classes=classes,
        ffn=ffn, rc=rc, **dims,
    )
