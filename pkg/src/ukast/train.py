"""Optimizer, schedule, losses, metrics, and the training loop.

AdamW with decoupled weight decay (norm parameters, biases, and rational
coefficients exempt), cosine annealing over the full step budget, and an
equally weighted soft-Dice + cross-entropy objective.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, kernels
from . import tensor as T
from .data import augment, sliding_window_infer
from .tensor import Tensor

DECAY_EXEMPT_SUFFIXES = ("bias", "gamma", "beta", "a", "b", "w", "pos_emb", "rel_bias")


def is_decay_exempt(name):
    return name.rsplit(".", 1)[-1] in DECAY_EXEMPT_SUFFIXES


class AdamW:
    def __init__(self, named_params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-3):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros(p.size, np.float32) for _, p in self.params]
        self._v = [np.zeros(p.size, np.float32) for _, p in self.params]
        self._decay = [not is_decay_exempt(name) for name, _ in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for (name, p), m, v, decay in zip(self.params, self._m, self._v, self._decay):
            if p.grad is None:
                raise RuntimeError(f"missing gradient for parameter {name!r}")
            kernels.adamw_update(
                p.data.reshape(-1), p.grad.reshape(-1), m, v,
                lr, self.beta1, self.beta2, self.eps,
                self.weight_decay if decay else 0.0, bc1, bc2,
            )


def cosine_lr(step, total_steps, lr_base):
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ----------------------------------------------------------------------
# losses and metrics

DICE_SMOOTH = 1e-5


def dice_ce_loss(logits, target_mask, class_count):
    """0.5 * soft-Dice loss + 0.5 * mean pixel cross-entropy.

    logits: Tensor [C, H, W] or [N, C, H, W]; target_mask: matching
    integer ndarray [H, W] or [N, H, W].
    """
    target = np.asarray(target_mask)
    single = logits.ndim == 3
    if single:
        logits = T.reshape(logits, (1,) + tuple(logits.shape))
        target = target[None]
    n, c, h, w = logits.shape
    if c != class_count:
        raise T.ShapeError(f"logits have {c} channels, expected {class_count} classes")
    if target.shape != (n, h, w):
        raise T.ShapeError(
            f"target shape {target.shape} does not match logits {(n, h, w)}"
        )
    if target.min() < 0 or target.max() >= class_count:
        raise ValueError(
            f"mask labels must lie in [0, {class_count}); got "
            f"[{int(target.min())}, {int(target.max())}]"
        )
    onehot = np.zeros((n, class_count, h, w), dtype=logits.dtype)
    np.put_along_axis(onehot, target[:, None], 1.0, axis=1)
    onehot_t = Tensor(onehot)

    probs = T.softmax(logits, axis=1)
    inter = T.reduce_sum(T.mul(probs, onehot_t), axes=(2, 3))
    sums = T.add(T.reduce_sum(probs, axes=(2, 3)), onehot.sum(axis=(2, 3)))
    dice = T.div(T.add(T.mul(inter, 2.0), DICE_SMOOTH), T.add(sums, DICE_SMOOTH))
    dice_loss = T.sub(1.0, T.reduce_mean(dice))

    logp = T.log_softmax(logits, axis=1)
    ce = T.mul(T.reduce_sum(T.mul(logp, onehot_t)), -1.0 / (n * h * w))
    return T.add(T.mul(dice_loss, 0.5), T.mul(ce, 0.5))


def dice_score(pred_mask, target_mask, class_count):
    """Hard Dice per foreground class; both-empty counts as 1.0.

    Returns (per_class list over classes 1..C-1, mean).
    """
    pred = np.asarray(pred_mask)
    target = np.asarray(target_mask)
    if pred.shape != target.shape:
        raise T.ShapeError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    per_class = []
    for cls in range(1, class_count):
        p = pred == cls
        t = target == cls
        denom = int(p.sum()) + int(t.sum())
        if denom == 0:
            per_class.append(1.0)
        else:
            per_class.append(2.0 * int((p & t).sum()) / denom)
    return per_class, float(np.mean(per_class))


# ----------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    seed: int
    fraction: float
    config: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)  # [{"train_loss":…, "val_dice":…}]

    def append_epoch(self, train_loss, val_dice):
        self.epochs.append({"train_loss": float(train_loss), "val_dice": float(val_dice)})

    @property
    def best_dice(self):
        return max((e["val_dice"] for e in self.epochs), default=0.0)

    def to_text(self):
        lines = [f"seed {self.seed}", f"fraction {self.fraction!r}"]
        for key in sorted(self.config):
            lines.append(f"{key} {self.config[key]}")
        for i, e in enumerate(self.epochs, start=1):
            lines.append(
                f"epoch {i} train_loss {e['train_loss']!r} val_dice {e['val_dice']!r}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        manifest = cls(seed=0, fraction=1.0)
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "seed":
                manifest.seed = int(parts[1])
            elif parts[0] == "fraction":
                manifest.fraction = float(parts[1])
            elif parts[0] == "epoch":
                manifest.epochs.append(
                    {"train_loss": float(parts[3]), "val_dice": float(parts[5])}
                )
            else:
                manifest.config[parts[0]] = " ".join(parts[1:])
        return manifest

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


# ----------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    crop: int | None = None
    noise_sigma: float = 0.02
    flips: bool = True
    rotations: bool = True
    seed: int = 0
    fraction: float = 1.0
    out_dir: str | None = None
    log: bool = False


def _stack_batch(samples):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples])
    return images, masks


def evaluate(model, samples, class_count, tile):
    """Mean Dice over samples via overlapping sliding-window inference."""
    scores = []
    for s in samples:
        logits = sliding_window_infer(model, s.image, tile)
        pred = logits.argmax(axis=0)
        _, mean = dice_score(pred, s.mask, class_count)
        scores.append(mean)
    return float(np.mean(scores)) if scores else 0.0


def fit(model, dataset, hyper: TrainConfig):
    """Shuffled mini-batch training with per-epoch validation.

    Deterministic in (hyper.seed, data, config); the manifest is rewritten
    after every epoch and the best-Dice checkpoint is retained.
    """
    spec = dataset.spec
    train_ids = list(range(max(1, round(len(dataset.train) * hyper.fraction))))
    train = [dataset.train[i] for i in train_ids]
    tile = hyper.crop or spec.size
    steps_per_epoch = math.ceil(len(train) / hyper.batch_size)
    total_steps = hyper.epochs * steps_per_epoch
    manifest = RunManifest(seed=hyper.seed, fraction=hyper.fraction,
                           config=model.cfg.to_flat())
    manifest.config["hyper.epochs"] = str(hyper.epochs)
    manifest.config["hyper.batch_size"] = str(hyper.batch_size)
    manifest.config["hyper.lr"] = repr(hyper.lr)
    manifest.config["hyper.weight_decay"] = repr(hyper.weight_decay)
    manifest.config["data.train_count"] = str(len(train))

    opt = AdamW(model.named_parameters(), lr=hyper.lr, betas=hyper.betas,
                eps=hyper.eps, weight_decay=hyper.weight_decay)
    if hyper.out_dir:
        os.makedirs(hyper.out_dir, exist_ok=True)
    best = -1.0
    step = 0
    lr_span = max(1, total_steps - 1)
    t_start = time.monotonic()
    for epoch in range(hyper.epochs):
        order = np.random.default_rng([hyper.seed, 11, epoch]).permutation(len(train))
        model.train()
        losses = []
        for b in range(steps_per_epoch):
            ids = order[b * hyper.batch_size:(b + 1) * hyper.batch_size]
            batch_rng = np.random.default_rng([hyper.seed, 13, epoch, b])
            samples = [
                augment(train[i], batch_rng, crop=hyper.crop, flips=hyper.flips,
                        rotations=hyper.rotations, noise_sigma=hyper.noise_sigma)
                for i in ids
            ]
            images, masks = _stack_batch(samples)
            with T.Tape():
                logits = model(Tensor(images))
                loss = dice_ce_loss(logits, masks, spec.classes)
                value = loss.item()
                if not math.isfinite(value):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} batch {b}; "
                        f"batch rng seed ({hyper.seed}, 13, {epoch}, {b})"
                    )
                model.zero_grad()
                T.backward(loss)
            opt.step(lr=cosine_lr(step, lr_span, hyper.lr))
            step += 1
            losses.append(value)
        model.eval()
        val_dice = evaluate(model, dataset.test, spec.classes, tile)
        manifest.append_epoch(float(np.mean(losses)), val_dice)
        if hyper.log:
            print(f"epoch {epoch + 1}/{hyper.epochs} "
                  f"loss {np.mean(losses):.4f} val_dice {val_dice:.4f}")
        if hyper.out_dir:
            manifest.save(os.path.join(hyper.out_dir, "manifest.txt"))
            if val_dice > best:
                best = val_dice
                checkpoint.save_arrays(
                    os.path.join(hyper.out_dir, "best"), model.state_arrays()
                )
    if hyper.out_dir:
        # wall time lives outside the manifest so manifests stay bit-identical
        with open(os.path.join(hyper.out_dir, "walltime.txt"), "w") as fh:
            fh.write(f"seconds {time.monotonic() - t_start:.3f}\n")
    return manifest
