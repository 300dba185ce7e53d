"""Seeded synthetic segmentation benchmark, augmentation pipeline,
nested fraction subsetting, and overlapping sliding-window inference.

Every sample is a pure function of (global seed, sample id): textured
background plus 1-3 anti-aliased ellipses whose class-dependent intensity
and geometry vary sample to sample, with an exact integer mask.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CANONICAL_FRACTIONS = (0.10, 0.25, 0.50, 1.00)

MASK_FRACTION_LO = 0.02
MASK_FRACTION_HI = 0.60


@dataclass
class SynthSpec:
    train_count: int = 40
    test_count: int = 8
    size: int = 64
    channels: int = 1
    classes: int = 3
    min_blobs: int = 1
    max_blobs: int = 3
    contrast: float = 1.0  # difficulty tier: lower = harder
    noise: float = 0.03

    def __post_init__(self):
        if self.train_count <= 0 or self.test_count < 0:
            raise ValueError("counts must be positive")
        if self.classes < 2:
            raise ValueError("need at least background + one foreground class")


@dataclass
class SplitSpec:
    train_count: int
    test_count: int
    fraction: float = 1.0

    def __post_init__(self):
        if not any(abs(self.fraction - f) < 1e-9 for f in CANONICAL_FRACTIONS):
            raise ValueError(
                f"fraction must be one of {CANONICAL_FRACTIONS}, got {self.fraction}"
            )

    def train_ids(self):
        """Nested prefix subsets: smaller fractions are subsets of larger."""
        n = max(1, round(self.train_count * self.fraction))
        return list(range(n))


@dataclass
class Sample:
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] int64, values < classes
    sample_id: int


class Dataset:
    def __init__(self, train, test, spec, seed):
        self.train = train
        self.test = test
        self.spec = spec
        self.seed = seed


def _smooth_field(rng, size):
    """Cheap band-limited texture: a few random sinusoids."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    field = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.5, size=2) / size
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        field += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return field / 3.0


def _draw_blobs(rng, spec):
    size = spec.size
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((size, size))
    mask = np.zeros((size, size), dtype=np.int64)
    covered = np.zeros((size, size))
    n_blobs = int(rng.integers(spec.min_blobs, spec.max_blobs + 1))
    for _ in range(n_blobs):
        cls = int(rng.integers(1, spec.classes))
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        ry, rx = rng.uniform(0.09, 0.22, size=2) * size
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        d = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
        # signed distance in pixels, smoothed over ~1.5 px for anti-aliasing
        t = (1.0 - d) * min(rx, ry)
        cov = np.clip(0.5 + t / 1.5, 0.0, 1.0)
        base = 0.45 + 0.5 * cls / (spec.classes - 1)
        intensity = 0.45 + spec.contrast * (base - 0.45) + rng.uniform(-0.06, 0.06)
        img = img * (1 - cov) + cov * intensity
        covered = np.maximum(covered, cov)
        mask[d <= 1.0] = cls
    return img, covered, mask


def make_sample(spec: SynthSpec, seed, sample_id):
    """Deterministic sample from (seed, sample_id)."""
    rng = np.random.default_rng([seed, sample_id])
    size = spec.size
    background = 0.32 + 0.08 * _smooth_field(rng, size)
    for _ in range(20):
        blob_img, covered, mask = _draw_blobs(rng, spec)
        frac = float((mask > 0).mean())
        if MASK_FRACTION_LO <= frac <= MASK_FRACTION_HI:
            break
    img = background * (1 - covered) + blob_img
    img = img + rng.normal(0.0, spec.noise, size=(size, size))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    image = np.broadcast_to(img, (spec.channels, size, size)).copy()
    return Sample(image=image, mask=mask, sample_id=sample_id)


def generate(spec: SynthSpec, seed):
    """Full dataset; train ids 0..train_count-1, test ids offset by 10**6."""
    train = [make_sample(spec, seed, i) for i in range(spec.train_count)]
    test = [make_sample(spec, seed, 1_000_000 + i) for i in range(spec.test_count)]
    return Dataset(train, test, spec, seed)


# ----------------------------------------------------------------------
# augmentation


def augment(sample: Sample, rng, crop=None, flips=True, rotations=True,
            noise_sigma=0.02):
    """Random crop, 50% h/v flips, uniform 90-degree rotation, gaussian
    noise on the image only; the mask gets the identical geometry."""
    img, mask = sample.image, sample.mask
    h, w = mask.shape
    if crop is not None:
        if crop > h or crop > w:
            raise ValueError(f"crop {crop} exceeds image size {h}x{w}")
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        img = img[:, top:top + crop, left:left + crop]
        mask = mask[top:top + crop, left:left + crop]
    if flips:
        if rng.random() < 0.5:
            img = img[:, :, ::-1]
            mask = mask[:, ::-1]
        if rng.random() < 0.5:
            img = img[:, ::-1, :]
            mask = mask[::-1, :]
    if rotations:
        k = int(rng.integers(0, 4))
        if k:
            img = np.rot90(img, k, axes=(1, 2))
            mask = np.rot90(mask, k, axes=(0, 1))
    img = np.ascontiguousarray(img, dtype=np.float32)
    mask = np.ascontiguousarray(mask)
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, size=img.shape).astype(np.float32)
    return Sample(image=img, mask=mask, sample_id=sample.sample_id)


# ----------------------------------------------------------------------
# sliding-window inference


def tile_starts(length, tile, stride):
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] != length - tile:
        starts.append(length - tile)  # clamp the edge tile inward
    return starts


def sliding_window_infer(model, image, tile, overlap=0.5):
    """Average logits over tiles on a stride tile*(1-overlap) grid.

    image: [C, H, W] ndarray -> logits [classes, H, W] ndarray. Reduces to
    one plain forward pass (bit for bit) when the image equals the tile.
    """
    c, h, w = image.shape
    if tile > h or tile > w:
        raise ValueError(f"tile {tile} larger than image {h}x{w}")
    stride = max(1, int(round(tile * (1.0 - overlap))))
    was_training = model.training
    model.eval()
    out = None
    counts = np.zeros((1, h, w), dtype=np.float32)
    for top in tile_starts(h, tile, stride):
        for left in tile_starts(w, tile, stride):
            patch = image[None, :, top:top + tile, left:left + tile]
            logits = model(Tensor(np.ascontiguousarray(patch))).data[0]
            if out is None:
                out = np.zeros((logits.shape[0], h, w), dtype=logits.dtype)
            out[:, top:top + tile, left:left + tile] += logits
            counts[:, top:top + tile, left:left + tile] += 1.0
    if was_training:
        model.train()
    return out / counts


# ----------------------------------------------------------------------
# on-disk form: raw image/mask pair per sample plus an index manifest


def save_dataset(directory, dataset: Dataset):
    os.makedirs(directory, exist_ok=True)
    spec = dataset.spec
    lines = [
        f"channels {spec.channels} size {spec.size} classes {spec.classes} "
        f"seed {dataset.seed} train {len(dataset.train)} test {len(dataset.test)}"
    ]
    for split, samples in (("train", dataset.train), ("test", dataset.test)):
        for i, s in enumerate(samples):
            stem = f"{split}_{i:06d}"
            s.image.astype("<f4").tofile(os.path.join(directory, stem + ".img.bin"))
            s.mask.astype("<u1").tofile(os.path.join(directory, stem + ".msk.bin"))
            lines.append(f"{split} {i} {stem}")
    with open(os.path.join(directory, "index.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(directory):
    index = os.path.join(directory, "index.txt")
    if not os.path.isfile(index):
        raise FileNotFoundError(f"no dataset index at {index}")
    with open(index) as fh:
        header = fh.readline().split()
        fields = dict(zip(header[0::2], (int(v) for v in header[1::2])))
        spec = SynthSpec(
            train_count=max(1, fields["train"]), test_count=fields["test"],
            size=fields["size"], channels=fields["channels"], classes=fields["classes"],
        )
        train, test = [], []
        for line in fh:
            parts = line.split()
            if len(parts) != 3:
                continue
            split, i, stem = parts[0], int(parts[1]), parts[2]
            img = np.fromfile(os.path.join(directory, stem + ".img.bin"), dtype="<f4")
            img = img.reshape(spec.channels, spec.size, spec.size)
            mask = np.fromfile(os.path.join(directory, stem + ".msk.bin"), dtype="<u1")
            mask = mask.reshape(spec.size, spec.size).astype(np.int64)
            (train if split == "train" else test).append(Sample(img, mask, i))
    return Dataset(train, test, spec, fields["seed"])
