"""Command-line entry point.

Subcommands: synth-data, train, eval, flops, gradcheck, sweep, bench.
Flag precedence: command-line flags override config-file values override
built-in defaults. ``UKAST_THREADS`` caps sweep worker processes.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import checkpoint, complexity, config as cfgmod, data as datamod, gradcheck
from .model import ModelConfig, SegModel, make_variant, parse_variant, variant_name
from .train import TrainConfig, dice_score, evaluate, fit


def _load_flat_config(path):
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    return cfgmod.read_config(path)


def _build_model_config(args, flat, dataset=None):
    enc, ffn, rc = parse_variant(flat.get("variant", args.variant))
    cfg = make_variant(enc, ffn, rc, scale=args.scale)
    overrides = {}
    if dataset is not None:
        spec = dataset.spec
        overrides.update(in_channels=spec.channels, classes=spec.classes,
                         img_size=spec.size)
    model_keys = {k: v for k, v in flat.items() if k.startswith("model.")}
    if model_keys:
        merged = cfgmod.overlay(cfg.to_flat(), model_keys,
                                {f"model.{k}": str(v) for k, v in overrides.items()})
        return ModelConfig.from_flat(merged)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _hyper_from(args, flat):
    hyper = TrainConfig()
    mapping = {
        "hyper.epochs": ("epochs", int),
        "hyper.batch_size": ("batch_size", int),
        "hyper.lr": ("lr", float),
        "hyper.weight_decay": ("weight_decay", float),
        "hyper.crop": ("crop", int),
        "hyper.noise_sigma": ("noise_sigma", float),
    }
    for key, (attr, cast) in mapping.items():
        if key in flat:
            setattr(hyper, attr, cast(flat[key]))
    for attr in ("epochs", "batch_size", "lr", "weight_decay", "crop"):
        flag = getattr(args, attr, None)
        if flag is not None:
            setattr(hyper, attr, flag)
    hyper.seed = args.seed
    hyper.fraction = args.fraction
    return hyper


# ----------------------------------------------------------------------
# subcommands


def cmd_synth_data(args):
    spec = datamod.SynthSpec(
        train_count=args.count, test_count=args.test_count, size=args.size,
        channels=args.channels, classes=args.classes,
    )
    dataset = datamod.generate(spec, args.seed)
    datamod.save_dataset(args.out, dataset)
    print(f"wrote {args.count} train + {args.test_count} test samples to {args.out}")
    return 0


def _require_data(path):
    if not os.path.isdir(path):
        print(f"error: dataset directory not found: {path}", file=sys.stderr)
        return None
    return datamod.load_dataset(path)


def cmd_train(args):
    dataset = _require_data(args.data)
    if dataset is None:
        return 2
    flat = _load_flat_config(args.config)
    cfg = _build_model_config(args, flat, dataset)
    hyper = _hyper_from(args, flat)
    hyper.out_dir = args.out
    model = SegModel(cfg, seed=args.seed)
    manifest = fit(model, dataset, hyper)
    if args.out:
        cfgmod.write_config(os.path.join(args.out, "config.txt"), cfg.to_flat())
    print(f"trained {hyper.epochs} epochs; best val dice {manifest.best_dice:.4f}")
    return 0


def cmd_eval(args):
    dataset = _require_data(args.data)
    if dataset is None:
        return 2
    cfg_path = os.path.join(args.checkpoint, "config.txt")
    if not os.path.isfile(cfg_path):
        print(f"error: no config.txt next to checkpoint {args.checkpoint}",
              file=sys.stderr)
        return 2
    cfg = ModelConfig.from_flat(cfgmod.read_config(cfg_path))
    model = SegModel(cfg, seed=0)
    model.load_state_arrays(checkpoint.load_arrays(args.checkpoint))
    model.eval()
    tile = min(cfg.img_size, dataset.spec.size)
    per_class = np.zeros(dataset.spec.classes - 1)
    means = []
    for s in dataset.test:
        logits = datamod.sliding_window_infer(model, s.image, tile)
        pred = logits.argmax(axis=0)
        pc, mean = dice_score(pred, s.mask, dataset.spec.classes)
        per_class += np.asarray(pc)
        means.append(mean)
    per_class /= max(1, len(dataset.test))
    mean = float(np.mean(means)) if means else 0.0
    if args.format == "csv":
        print("class,dice")
        for i, v in enumerate(per_class, start=1):
            print(f"{i},{v:.6f}")
        print(f"mean,{mean:.6f}")
    else:
        for i, v in enumerate(per_class, start=1):
            print(f"class {i} dice {v:.4f}")
        print(f"mean dice {mean:.4f}")
    return 0


def cmd_flops(args):
    flat = _load_flat_config(args.config)
    names = [v.strip() for v in args.variant.split(",")]
    summaries = []
    for name in names:
        enc, ffn, rc = parse_variant(name)
        cfg = make_variant(enc, ffn, rc, scale=args.scale)
        if any(k.startswith("model.") for k in flat):
            cfg = ModelConfig.from_flat(cfgmod.overlay(cfg.to_flat(), flat))
        model = SegModel(cfg, seed=0)
        report = complexity.count(model, (cfg.in_channels, cfg.img_size, cfg.img_size))
        summaries.append((variant_name(enc, ffn, rc), report))
        if len(names) == 1:
            print(report.format_csv() if args.format == "csv" else report.format_text())
    if len(names) > 1:
        if args.format == "csv":
            print("variant,params,macs,gflops")
            for name, rep in summaries:
                print(f"{name},{rep.params},{rep.macs},{rep.gflops:.6f}")
        else:
            for line in summaries[0][1].header_lines():
                print("# " + line)
            width = max(len(n) for n, _ in summaries)
            print(f"{'variant'.ljust(width)}  {'params':>12}  {'gflops':>10}")
            for name, rep in summaries:
                print(f"{name.ljust(width)}  {rep.params:>12}  {rep.gflops:>10.6f}")
        for (na, ra), (nb, rb) in zip(summaries, summaries[1:]):
            dp = rb.params - ra.params
            df = rb.gflops - ra.gflops
            print(f"delta {nb} - {na}: params {dp:+d} gflops {df:+.6f}")
    return 0


def cmd_gradcheck(args):
    t0 = time.monotonic()
    results = gradcheck.run_suite(scope=args.scope)
    failed = 0
    for name, scope, err, tol, passed in results:
        tag = "PASS" if passed else "FAIL"
        if not passed:
            failed += 1
        print(f"{tag} {name} (scope {scope}) rel_err {err:.3e} tol {tol:.0e}")
    dt = time.monotonic() - t0
    print(f"{len(results) - failed}/{len(results)} gradient checks passed in {dt:.1f}s")
    return 1 if failed else 0


def _sweep_cell(cell):
    data_dir, variant, fraction, seed, scale, epochs, batch_size, lr = cell
    dataset = datamod.load_dataset(data_dir)
    enc, ffn, rc = parse_variant(variant)
    cfg = make_variant(enc, ffn, rc, scale=scale)
    cfg = dataclasses.replace(
        cfg, in_channels=dataset.spec.channels, classes=dataset.spec.classes,
        img_size=dataset.spec.size,
    )
    hyper = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr,
                        seed=seed, fraction=fraction)
    model = SegModel(cfg, seed=seed)
    manifest = fit(model, dataset, hyper)
    return variant, fraction, seed, manifest.best_dice


def run_sweep(data_dir, variants, fractions, seeds, scale="desk", epochs=4,
              batch_size=8, lr=2e-4, workers=None):
    """Cross-product of training runs; failed cells are recorded and the
    sweep continues. Returns {(variant, fraction): [dice or None per seed]}."""
    cells = [
        (data_dir, v, f, s, scale, epochs, batch_size, lr)
        for v in variants for f in fractions for s in seeds
    ]
    if workers is None:
        env = os.environ.get("UKAST_THREADS")
        workers = int(env) if env else 1
    workers = max(1, min(workers, len(cells)))
    results = {}

    def record(variant, fraction, seed, dice):
        results.setdefault((variant, fraction), {})[seed] = dice

    if workers == 1:
        for cell in cells:
            try:
                v, f, s, dice = _sweep_cell(cell)
                record(v, f, s, dice)
            except Exception as exc:  # isolate per cell
                print(f"cell {cell[1]} f={cell[2]} seed={cell[3]} failed: {exc}",
                      file=sys.stderr)
                record(cell[1], cell[2], cell[3], None)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_sweep_cell, cell): cell for cell in cells}
            for future, cell in futures.items():
                try:
                    v, f, s, dice = future.result()
                    record(v, f, s, dice)
                except Exception as exc:
                    print(f"cell {cell[1]} f={cell[2]} seed={cell[3]} failed: {exc}",
                          file=sys.stderr)
                    record(cell[1], cell[2], cell[3], None)
    return results


def _mlp_counterpart(variant):
    enc, ffn, rc = parse_variant(variant)
    if ffn != "grkan":
        return None
    return variant_name(enc, "mlp", rc)


def format_sweep_table(results, variants, fractions, fmt="text"):
    """Variant x fraction matrix of mean dice over seeds, with delta rows
    for grkan variants whose mlp counterpart is in the sweep."""

    def cell_mean(variant, fraction):
        per_seed = results.get((variant, fraction), {})
        vals = [v for v in per_seed.values() if v is not None]
        if not vals:
            return None
        return float(np.mean(vals))

    rows = []
    for v in variants:
        rows.append((v, [cell_mean(v, f) for f in fractions]))
    deltas = []
    for v in variants:
        base = _mlp_counterpart(v)
        if base and base in variants:
            deltas.append((
                f"delta {v} - {base}",
                [
                    None if cell_mean(v, f) is None or cell_mean(base, f) is None
                    else cell_mean(v, f) - cell_mean(base, f)
                    for f in fractions
                ],
            ))

    def show(x, signed=False):
        if x is None:
            return "failed"
        return f"{x:+.4f}" if signed else f"{x:.4f}"

    if fmt == "csv":
        lines = ["variant," + ",".join(f"{f:g}" for f in fractions)]
        for name, vals in rows:
            lines.append(name + "," + ",".join(show(v) for v in vals))
        for name, vals in deltas:
            lines.append(name + "," + ",".join(show(v, True) for v in vals))
        return "\n".join(lines)
    width = max(len(name) for name, _ in rows + deltas) if rows else 10
    lines = [f"{'variant'.ljust(width)}  " + "  ".join(f"{f:>8g}" for f in fractions)]
    for name, vals in rows:
        lines.append(f"{name.ljust(width)}  " + "  ".join(f"{show(v):>8}" for v in vals))
    for name, vals in deltas:
        lines.append(f"{name.ljust(width)}  " + "  ".join(f"{show(v, True):>8}" for v in vals))
    return "\n".join(lines)


def cmd_sweep(args):
    if not args.variants:
        print("error: sweep needs at least one variant", file=sys.stderr)
        return 2
    dataset_dir = args.data
    if not os.path.isdir(dataset_dir):
        print(f"error: dataset directory not found: {dataset_dir}", file=sys.stderr)
        return 2
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    fractions = [float(f) for f in args.fractions.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    if not variants or not fractions:
        print("error: need at least one variant and one fraction", file=sys.stderr)
        return 2
    results = run_sweep(dataset_dir, variants, fractions, seeds, scale=args.scale,
                        epochs=args.epochs or 4, batch_size=args.batch_size or 8,
                        lr=args.lr or 2e-4, workers=args.workers)
    table = format_sweep_table(results, variants, fractions, fmt=args.format)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for fmt, fname in (("text", "sweep.txt"), ("csv", "sweep.csv")):
            with open(os.path.join(args.out, fname), "w") as fh:
                fh.write(format_sweep_table(results, variants, fractions, fmt=fmt) + "\n")
    return 0


def cmd_bench(args):
    from .kernels import numpy_impl

    try:
        from .kernels import numba_impl
    except ImportError:
        print("numba unavailable; nothing to compare")
        return 0

    rng = np.random.default_rng(0)
    rows, channels, groups = args.rows, args.channels, 8
    x = rng.standard_normal((rows, channels)).astype(np.float32)
    a = rng.standard_normal((groups, 4)).astype(np.float32)
    b = rng.standard_normal((groups, 4)).astype(np.float32)
    g = rng.standard_normal((rows, channels)).astype(np.float32)
    n = rows * channels
    p = rng.standard_normal(n).astype(np.float32)
    gr = rng.standard_normal(n).astype(np.float32)
    m = np.zeros(n, np.float32)
    v = np.zeros(n, np.float32)

    cases = [
        ("rational fwd", lambda impl: impl.pau_forward(x, a, b)),
        ("rational bwd", lambda impl: impl.pau_backward(x, a, b, g)),
        ("adamw update", lambda impl: impl.adamw_update(
            p, gr, m, v, 1e-3, 0.9, 0.999, 1e-8, 1e-2, 0.1, 0.01)),
    ]
    print(f"kernel benchmark: {rows} rows x {channels} channels, {args.iters} iters")
    print(f"{'kernel':<14} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, call in cases:
        call(numba_impl)  # trigger jit before timing
        times = {}
        for label, impl in (("numpy", numpy_impl), ("numba", numba_impl)):
            t0 = time.perf_counter()
            for _ in range(args.iters):
                call(impl)
            times[label] = (time.perf_counter() - t0) / args.iters * 1e3
        print(f"{name:<14} {times['numpy']:>10.3f} {times['numba']:>10.3f} "
              f"{times['numpy'] / times['numba']:>8.2f}x")
    return 0


# ----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="ukast")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant=True):
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", choices=("text", "csv"), default="text")
        p.add_argument("--scale", choices=("desk", "tiny"), default="desk")
        if variant:
            p.add_argument("--variant", default="ukast")

    p = sub.add_parser("synth-data", help="generate the synthetic benchmark")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--test-count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train", help="train one variant on a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="restore a checkpoint and report dice")
    common(p, variant=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="symbolic cost report")
    common(p)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scope", choices=("all",) + gradcheck.SCOPES, default="all")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("sweep", help="data-efficiency sweep")
    common(p, variant=False)
    p.add_argument("--data", required=True)
    p.add_argument("--variants", default="swin+mlp+rc,swin+grkan+rc")
    p.add_argument("--fractions", default="0.1,0.25,0.5,1.0")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("bench", help="compare numba and numpy kernel backends")
    p.add_argument("--rows", type=int, default=4096)
    p.add_argument("--channels", type=int, default=96)
    p.add_argument("--iters", type=int, default=50)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
