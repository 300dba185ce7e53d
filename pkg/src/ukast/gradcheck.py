"""Central finite-difference gradient checks for every differentiable
operation, in double precision. Used both by the test suite and by the
``gradcheck`` CLI command.

Relative error per checked tensor: max|analytic - numeric| divided by
max(1, max|numeric|).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import PatchEmbed, PatchMerge, WindowAttention
from .grkan import GrKanFfn, GrKanLayer, MlpFfn
from .model import ConvBlock, DecoderStage, RCBlock, SwinBlockPair, make_variant
from .nn import Module
from .rational import RationalParams, pau_forward
from .tensor import Tensor
from .train import dice_ce_loss

STEP = 1e-5
TOL_SIMPLE = 1e-4
TOL_COMPOSITE = 1e-3


def to_double(module: Module):
    """Cast a module's parameters and buffers to float64 in place."""
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
    for _, b in module.named_buffers():
        b.data = b.data.astype(np.float64)
    return module


def randomize_rationals(module: Module, rng):
    """Replace fitted rational coefficients with O(1) random ones.

    Fitted denominators can sit within one finite-difference step of the
    |Q| sign change, where central differences straddle the kink; the
    analytic subgradient is still correct but unmeasurable there.
    """
    from .rational import GroupedRational

    stack = [module]
    while stack:
        mod = stack.pop()
        if isinstance(mod, GroupedRational):
            mod.a.data = rng.normal(size=mod.a.shape).astype(mod.a.dtype)
            mod.b.data = (0.5 * rng.normal(size=mod.b.shape) +
                          0.5 * np.sign(rng.normal(size=mod.b.shape))).astype(mod.b.dtype)
        stack.extend(mod._children.values())
    return module


def check_gradients(fn, tensors, step=STEP):
    """Compare tape gradients of scalar fn(*tensors) with central
    differences; returns the worst relative error over all tensors."""
    tensors = list(tensors)
    for t in tensors:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None
    with T.Tape():
        out = fn(*tensors)
        T.backward(out)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*tensors).item()
            flat[i] = orig - step
            lo = fn(*tensors).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2 * step)
        denom = max(1.0, float(np.abs(numeric).max()))
        err = float(np.abs(analytic - numeric).max()) / denom
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------
# the suite


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _weighted_sum(x, rng):
    r = Tensor(rng.normal(size=x.shape), dtype=np.float64)
    return T.reduce_sum(T.mul(x, r))


def _suite():
    checks = []

    def register(name, scope, tol, builder):
        checks.append((name, scope, tol, builder))

    rng0 = np.random.default_rng

    # --- tensor primitives
    def ew_case(kind, binary, positive=False):
        def build(seed):
            rng = rng0(seed)
            x = _rand(rng, 3, 4)
            if positive:
                x = Tensor(np.abs(x.data) + 0.5, dtype=np.float64)
            ins = [x]
            if binary:
                ins.append(_rand(rng, 3, 4))
            fn = lambda *ts: _weighted_sum(T.elementwise(kind, *ts), rng0(seed + 1))
            return fn, ins
        return build

    for kind in ("add", "sub", "mul", "div"):
        register(f"elementwise.{kind}", "tensor", TOL_SIMPLE, ew_case(kind, True, kind == "div"))
    for kind in ("neg", "abs", "exp", "tanh", "gelu"):
        register(f"elementwise.{kind}", "tensor", TOL_SIMPLE, ew_case(kind, False))
    for kind in ("log", "sqrt"):
        register(f"elementwise.{kind}", "tensor", TOL_SIMPLE, ew_case(kind, False, True))

    def build_relu(seed):
        rng = rng0(seed)
        # keep values away from the kink where FD is ill-defined
        x = Tensor(rng.normal(size=(3, 4)) + 0.2 * np.sign(rng.normal(size=(3, 4))),
                   dtype=np.float64)
        return (lambda t: _weighted_sum(T.relu(t), rng0(seed + 1))), [x]

    register("elementwise.relu", "tensor", TOL_SIMPLE, build_relu)

    def build_broadcast(seed):
        rng = rng0(seed)
        x = _rand(rng, 2, 3, 4)
        y = _rand(rng, 4)
        fn = lambda a, b: _weighted_sum(T.mul(T.add(a, b), b), rng0(seed + 1))
        return fn, [x, y]

    register("broadcasting.trailing", "tensor", TOL_SIMPLE, build_broadcast)

    def build_matmul(seed):
        rng = rng0(seed)
        return (lambda a, b: _weighted_sum(T.matmul(a, b), rng0(seed + 1)),
                [_rand(rng, 3, 4), _rand(rng, 4, 2)])

    register("matmul.2d", "tensor", TOL_SIMPLE, build_matmul)

    def build_matmul_batched(seed):
        rng = rng0(seed)
        return (lambda a, b: _weighted_sum(T.matmul(a, b), rng0(seed + 1)),
                [_rand(rng, 2, 3, 4), _rand(rng, 4, 5)])

    register("matmul.batched_broadcast", "tensor", TOL_SIMPLE, build_matmul_batched)

    for red in ("sum", "mean", "max"):
        def build_red(seed, red=red):
            rng = rng0(seed)
            x = _rand(rng, 3, 5)
            return (lambda t: _weighted_sum(T.reduce(red, t, axes=1), rng0(seed + 1)), [x])
        register(f"reduce.{red}", "tensor", TOL_SIMPLE, build_red)

    def build_softmax(seed):
        rng = rng0(seed)
        return (lambda t: _weighted_sum(T.softmax(t, axis=-1), rng0(seed + 1)),
                [_rand(rng, 4, 6)])

    register("softmax", "tensor", TOL_SIMPLE, build_softmax)

    def build_log_softmax(seed):
        rng = rng0(seed)
        return (lambda t: _weighted_sum(T.log_softmax(t, axis=-1), rng0(seed + 1)),
                [_rand(rng, 4, 6)])

    register("log_softmax", "tensor", TOL_SIMPLE, build_log_softmax)

    def build_layer_norm(seed):
        rng = rng0(seed)
        x = _rand(rng, 3, 8)
        gamma = Tensor(1.0 + 0.1 * rng.normal(size=8), dtype=np.float64)
        beta = _rand(rng, 8)
        return (lambda a, g, b: _weighted_sum(T.layer_norm(a, g, b), rng0(seed + 1)),
                [x, gamma, beta])

    register("layer_norm", "tensor", TOL_SIMPLE, build_layer_norm)

    def build_norm_axes(seed):
        rng = rng0(seed)
        x = _rand(rng, 2, 3, 4, 4)
        gamma = Tensor(1.0 + 0.1 * rng.normal(size=(3, 1, 1)), dtype=np.float64)
        beta = _rand(rng, 3, 1, 1)
        fn = lambda a, g, b: _weighted_sum(
            T.normalize_affine(a, g, b, axes=(0, 2, 3), eps=1e-5), rng0(seed + 1))
        return fn, [x, gamma, beta]

    register("normalize.batch_axes", "tensor", TOL_SIMPLE, build_norm_axes)

    def build_movement(seed):
        rng = rng0(seed)
        x = _rand(rng, 2, 3, 4)

        def fn(t):
            y = T.transpose(t, (1, 0, 2))
            y = T.reshape(y, (3, 8))
            y = T.concat([y, y], axis=1)
            y = T.pad(y, ((1, 0), (0, 2)))
            y = T.roll(y, (1, -2), axes=(0, 1))
            return _weighted_sum(y[1:3, 2:10], rng0(seed + 1))

        return fn, [x]

    register("movement.combo", "tensor", TOL_SIMPLE, build_movement)

    def build_gather(seed):
        rng = rng0(seed)
        x = _rand(rng, 6, 3)
        idx = np.array([0, 2, 2, 5, 1])
        return (lambda t: _weighted_sum(T.gather(t, idx, axis=0), rng0(seed + 1)), [x])

    register("gather.scatter_add", "tensor", TOL_SIMPLE, build_gather)

    def build_conv(seed):
        rng = rng0(seed)
        x = _rand(rng, 2, 3, 5, 5)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, dtype=np.float64)
        b = _rand(rng, 4)
        return (lambda a, ww, bb: _weighted_sum(T.conv2d(a, ww, bb, padding=1),
                                                rng0(seed + 1)), [x, w, b])

    register("conv2d", "tensor", TOL_SIMPLE, build_conv)

    def build_deconv(seed):
        rng = rng0(seed)
        x = _rand(rng, 2, 3, 4, 4)
        w = Tensor(rng.normal(size=(3, 2, 2, 2)) * 0.3, dtype=np.float64)
        b = _rand(rng, 2)
        return (lambda a, ww, bb: _weighted_sum(T.conv_transpose2d(a, ww, bb, stride=2),
                                                rng0(seed + 1)), [x, w, b])

    register("conv_transpose2d", "tensor", TOL_SIMPLE, build_deconv)

    # --- rational
    def build_pau(seed):
        rng = rng0(seed)
        x = _rand(rng, 16)
        p = RationalParams(rng.normal(size=4), rng.normal(size=4) * 0.5, 1.0)
        return (lambda t: _weighted_sum(pau_forward(t, p), rng0(seed + 1)), [x])

    register("rational.pau_x", "rational", TOL_SIMPLE, build_pau)

    def build_pau_coeffs(seed):
        rng = rng0(seed)
        x = _rand(rng, 12, 8)
        a = Tensor(rng.normal(size=(4, 4)), dtype=np.float64)
        b = Tensor(rng.normal(size=(4, 4)) * 0.5, dtype=np.float64)
        return (lambda t, aa, bb: _weighted_sum(T.rational_op(t, aa, bb), rng0(seed + 1)),
                [x, a, b])

    register("rational.grouped", "rational", TOL_SIMPLE, build_pau_coeffs)

    # --- grkan
    def build_grkan_layer(seed):
        rng = rng0(seed)
        layer = GrKanLayer(8, 6, 4, rng)
        to_double(layer)
        x = _rand(rng, 5, 8)
        params = [p for _, p in layer.named_parameters()]
        fn = lambda t, *ps: _weighted_sum(layer(t), rng0(seed + 1))
        return fn, [x] + params

    register("grkan.layer", "grkan", TOL_SIMPLE, build_grkan_layer)

    def build_grkan_ffn(seed):
        rng = rng0(seed)
        ffn = GrKanFfn(8, rng, hidden_ratio=2, groups=4)
        randomize_rationals(ffn, rng)
        to_double(ffn)
        x = _rand(rng, 4, 8)
        params = [p for _, p in ffn.named_parameters()]
        fn = lambda t, *ps: _weighted_sum(ffn(t), rng0(seed + 1))
        return fn, [x] + params

    register("grkan.ffn", "grkan", TOL_COMPOSITE, build_grkan_ffn)

    def build_mlp_ffn(seed):
        rng = rng0(seed)
        ffn = MlpFfn(8, rng, hidden_ratio=2)
        to_double(ffn)
        x = _rand(rng, 4, 8)
        params = [p for _, p in ffn.named_parameters()]
        fn = lambda t, *ps: _weighted_sum(ffn(t), rng0(seed + 1))
        return fn, [x] + params

    register("mlp.ffn", "grkan", TOL_COMPOSITE, build_mlp_ffn)

    # --- attention
    def build_patch_embed(seed):
        rng = rng0(seed)
        pe = PatchEmbed((2, 2), 1, 6, rng)
        to_double(pe)
        x = _rand(rng, 1, 1, 4, 4)
        params = [p for _, p in pe.named_parameters()]
        fn = lambda t, *ps: _weighted_sum(pe(t), rng0(seed + 1))
        return fn, [x] + params

    register("attention.patch_embed", "attention", TOL_SIMPLE, build_patch_embed)

    def build_patch_merge(seed):
        rng = rng0(seed)
        pm = PatchMerge(4, rng)
        to_double(pm)
        x = _rand(rng, 1, 4, 4, 4)
        params = [p for _, p in pm.named_parameters()]
        fn = lambda t, *ps: _weighted_sum(pm(t), rng0(seed + 1))
        return fn, [x] + params

    register("attention.patch_merge", "attention", TOL_SIMPLE, build_patch_merge)

    def attn_case(shifted):
        def build(seed):
            rng = rng0(seed)
            attn = WindowAttention(4, 2, 2, rng, shifted=shifted)
            to_double(attn)
            x = _rand(rng, 1, 4, 4, 4)
            params = [p for _, p in attn.named_parameters()]
            fn = lambda t, *ps: _weighted_sum(attn(t), rng0(seed + 1))
            return fn, [x] + params
        return build

    register("attention.w_msa", "attention", TOL_COMPOSITE, attn_case(False))
    register("attention.sw_msa", "attention", TOL_COMPOSITE, attn_case(True))

    # --- model blocks
    def build_rc(seed):
        rng = rng0(seed)
        rc = RCBlock(3, rng)
        to_double(rc)
        x = _rand(rng, 2, 4, 4, 3)
        params = [p for _, p in rc.named_parameters()]
        fn = lambda t, *ps: _weighted_sum(rc(t), rng0(seed + 1))
        return fn, [x] + params

    register("model.rc_block", "model", TOL_COMPOSITE, build_rc)

    def build_block_pair(seed):
        rng = rng0(seed)
        cfg = make_variant("swin", "grkan", rc=True, scale="tiny")
        block = SwinBlockPair(cfg, 8, 2, rng, rc_enabled=True)
        randomize_rationals(block, rng)
        to_double(block)
        x = _rand(rng, 1, 4, 4, 8)
        params = [p for _, p in block.named_parameters()]
        fn = lambda t, *ps: _weighted_sum(block(t), rng0(seed + 1))
        return fn, [x] + params

    register("model.block_pair", "model", TOL_COMPOSITE, build_block_pair)

    def build_decoder_stage(seed):
        rng = rng0(seed)
        stage = DecoderStage(6, 3, rng, blocks=2)
        stage.eval()  # batch-norm eval path keeps FD well defined
        to_double(stage)
        deep = _rand(rng, 1, 6, 2, 2)
        skip = _rand(rng, 1, 3, 4, 4)
        params = [p for _, p in stage.named_parameters()]
        fn = lambda d, s, *ps: _weighted_sum(stage(d, s), rng0(seed + 1))
        return fn, [deep, skip] + params

    register("model.decoder_stage", "model", TOL_COMPOSITE, build_decoder_stage)

    def build_conv_block_bn(seed):
        rng = rng0(seed)
        block = ConvBlock(3, 4, rng, norm="batch")
        to_double(block)
        x = _rand(rng, 2, 3, 4, 4)
        params = [p for _, p in block.named_parameters()]
        fn = lambda t, *ps: _weighted_sum(block(t), rng0(seed + 1))
        return fn, [x] + params

    register("model.conv_block_batchnorm", "model", TOL_COMPOSITE, build_conv_block_bn)

    # --- loss
    def build_loss(seed):
        rng = rng0(seed)
        logits = _rand(rng, 3, 4, 4)
        target = rng0(seed + 2).integers(0, 3, size=(4, 4))
        return (lambda t: dice_ce_loss(t, target, 3), [logits])

    register("loss.dice_ce", "loss", TOL_SIMPLE, build_loss)

    return checks


SCOPES = ("tensor", "rational", "grkan", "attention", "model", "loss")


def run_suite(scope="all", seed=123):
    """Run the finite-difference suite; returns rows of
    (name, scope, err, tol, passed).

    Composites use a smaller step: their relu / |Q| kinks otherwise land
    inside the central-difference window for some seeds."""
    results = []
    for name, check_scope, tol, builder in _suite():
        if scope not in ("all", check_scope):
            continue
        fn, tensors = builder(seed)
        err = check_gradients(fn, tensors, step=STEP if tol == TOL_SIMPLE else 1e-6)
        results.append((name, check_scope, err, tol, err < tol))
    return results
