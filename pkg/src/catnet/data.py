"""Synthetic shape-family segmentation data, class-level folds and episodes.

Each class is one parametric shape family drawn with random position, scale
and a small rotation jitter over a smooth noisy background with faint
clutter. Masks are the exact pixel-centre rasterisation of the shape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .io import load_tensor, save_tensor
from .tensor import warn

logger = logging.getLogger(__name__)

MIN_FG, MAX_FG = 0.02, 0.60
_S3 = np.sqrt(3.0)


def _bar(u, v, a, b):
    return (np.abs(u) <= a) & (np.abs(v) <= b)


# Predicates on shape-frame coordinates scaled so the shape roughly fills the unit disk.
SHAPES: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "disk": lambda u, v: u * u + v * v <= 1.0,
    "ellipse": lambda u, v: u * u + (v / 0.5) ** 2 <= 1.0,
    "square": lambda u, v: _bar(u, v, 0.75, 0.75),
    "rectangle": lambda u, v: _bar(u, v, 1.0, 0.4),
    "ring": lambda u, v: (u * u + v * v <= 1.0) & (u * u + v * v >= 0.55 ** 2),
    "plus": lambda u, v: _bar(u, v, 1.0, 0.3) | _bar(u, v, 0.3, 1.0),
    "triangle": lambda u, v: (v >= -0.5) & (np.abs(u) <= (1.0 - v) / _S3),
    "diamond": lambda u, v: np.abs(u) + np.abs(v) <= 1.0,
    "ell": lambda u, v: _bar(u, v, 0.8, 0.8) & ((u < -0.25) | (v < -0.25)),
    "tee": lambda u, v: (_bar(u, v - 0.65, 0.9, 0.25)) | _bar(u, v, 0.25, 0.9),
    "star": lambda u, v: np.hypot(u, v) <= 0.6 + 0.4 * np.cos(5 * np.arctan2(v, u)),
    "crescent": lambda u, v: (u * u + v * v <= 1.0) & ((u - 0.45) ** 2 + v * v > 0.64),
    "frame": lambda u, v: _bar(u, v, 0.85, 0.85) & ~_bar(u, v, 0.5, 0.5),
    "hexagon": lambda u, v: (np.abs(v) <= _S3 / 2) & (_S3 * np.abs(u) + np.abs(v) <= _S3),
    "saltire": lambda u, v: _bar(u, v, 0.8, 0.8) & ((np.abs(u + v) <= 0.35) | (np.abs(u - v) <= 0.35)),
    "half_disk": lambda u, v: (u * u + v * v <= 1.0) & (v >= -0.2),
    "bar": lambda u, v: _bar(u, v, 1.2, 0.22),
    "cup": lambda u, v: _bar(u, v, 0.8, 0.8) & ~((np.abs(u) < 0.4) & (v > -0.4)),
    "bowtie": lambda u, v: (np.abs(v) <= np.abs(u)) & (np.abs(u) <= 0.9),
    "dumbbell": lambda u, v: (((np.abs(u) - 0.6) ** 2 + v * v) <= 0.16) | _bar(u, v, 0.6, 0.15),
}
SHAPE_NAMES = tuple(SHAPES)


@dataclass
class Dataset:
    images: np.ndarray  # [N, 1, H, W] float32
    masks: np.ndarray  # [N, H, W] float32 in {0, 1}
    class_ids: np.ndarray  # [N] int
    seed: int | None = None

    @property
    def n(self) -> int:
        return len(self.class_ids)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.class_ids))

    def samples_of(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.class_ids == cls)


def _background(rng: np.random.Generator, size: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    img = np.zeros((size, size))
    for _ in range(3):
        cy, cx = rng.uniform(0, size, 2)
        width = rng.uniform(0.2, 0.4) * size
        img += rng.uniform(-0.3, 0.3) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, size, 2)
        img += rng.uniform(0.2, 0.45) * (((yy - cy) ** 2 + (xx - cx) ** 2) <= 1.0)
    return img


def render_sample(cls: int, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One (image [H, W], mask [H, W]) pair of shape family ``cls``."""
    pred = SHAPES[SHAPE_NAMES[cls]]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    k = size / 32.0
    for _ in range(1000):
        r = rng.uniform(6.0, 11.0) * k
        margin = 1.25 * r
        if size - 2 * margin <= 0:
            r = size / 3.0
            margin = 1.25 * r
        cy, cx = rng.uniform(margin, size - margin, 2)
        theta = np.deg2rad(rng.uniform(-15.0, 15.0))
        dy, dx = (yy - cy) / r, (xx - cx) / r
        u = np.cos(theta) * dx + np.sin(theta) * dy
        v = -np.sin(theta) * dx + np.cos(theta) * dy
        mask = pred(u, -v).astype(np.float32)
        frac = mask.mean()
        if MIN_FG <= frac <= MAX_FG:
            break
    else:  # pragma: no cover - the scale range makes this unreachable at sane sizes
        raise ValueError(f"could not render class {cls} at size {size}")
    img = _background(rng, size, yy, xx)
    fg = rng.uniform(0.6, 1.0)
    img = np.where(mask > 0, fg, img) + rng.normal(0.0, 0.08, size=img.shape)
    img = (img - img.mean()) / (img.std() + 1e-8)
    return img.astype(np.float32), mask


def generate_synthetic_dataset(seed: int, n_classes: int, samples_per_class: int,
                               image_size: int = 32) -> Dataset:
    if not 4 <= n_classes <= len(SHAPES):
        raise ValueError(f"n_classes must be in [4, {len(SHAPES)}], got {n_classes}")
    if samples_per_class < 2:
        raise ValueError(f"samples_per_class must be >= 2 (one support, one query), got {samples_per_class}")
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    rng = np.random.default_rng(seed)
    images, masks, ids = [], [], []
    for cls in range(n_classes):
        for _ in range(samples_per_class):
            img, m = render_sample(cls, rng, image_size)
            images.append(img[None])
            masks.append(m)
            ids.append(cls)
    return Dataset(np.stack(images), np.stack(masks), np.asarray(ids, dtype=np.int64), seed)


# --------------------------------------------------------------------------
# On-disk layout


MANIFEST = "manifest.txt"


def save_dataset(ds: Dataset, root: str | Path) -> list[Path]:
    """Write images/, masks/ and the manifest; returns every path written."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    written, lines = [], []
    for i in range(ds.n):
        ip, mp = f"images/{i:05d}.ctnt", f"masks/{i:05d}.ctnt"
        save_tensor(root / ip, ds.images[i])
        written.append(root / ip)
        save_tensor(root / mp, ds.masks[i])
        written.append(root / mp)
        lines.append(f"{i}\t{int(ds.class_ids[i])}\t{ip}\t{mp}\n")
    (root / MANIFEST).write_text("".join(lines))
    written.append(root / MANIFEST)
    return written


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    images, masks, ids = [], [], []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        sid, cid, ip, mp = line.split("\t")
        if int(sid) != len(ids):
            raise ValueError(f"manifest out of order at sample {sid}")
        images.append(load_tensor(root / ip))
        masks.append(load_tensor(root / mp))
        ids.append(int(cid))
    return Dataset(np.stack(images), np.stack(masks), np.asarray(ids, dtype=np.int64))


# --------------------------------------------------------------------------
# Folds and episodes


@dataclass(frozen=True)
class Fold:
    index: int
    train_classes: tuple[int, ...]
    test_classes: tuple[int, ...]
    train_samples: tuple[int, ...]
    test_samples: tuple[int, ...]

    def classes(self, split: str) -> tuple[int, ...]:
        return self.train_classes if split == "train" else self.test_classes


def build_folds(ds: Dataset, n_folds: int = 5) -> list[Fold]:
    classes = ds.classes
    if n_folds < 2 or len(classes) < n_folds:
        raise ValueError(f"{len(classes)} classes cannot form {n_folds} folds")
    if len(classes) % n_folds:
        raise ValueError(f"{len(classes)} classes do not divide into {n_folds} folds")
    k = len(classes) // n_folds
    folds = []
    for f in range(n_folds):
        test = tuple(classes[f * k:(f + 1) * k])
        train = tuple(c for c in classes if c not in test)
        test_set = set(test)
        tr = tuple(int(i) for i in range(ds.n) if int(ds.class_ids[i]) not in test_set)
        te = tuple(int(i) for i in range(ds.n) if int(ds.class_ids[i]) in test_set)
        folds.append(Fold(f, train, test, tr, te))
    return folds


@dataclass
class Episode:
    support_images: np.ndarray  # [K, C, H, W]
    support_masks: np.ndarray  # [K, H, W]
    query_image: np.ndarray  # [C, H, W]
    query_truth: np.ndarray  # [H, W]
    class_id: int
    support_ids: tuple[int, ...] = ()
    query_id: int = -1


def make_episode(ds: Dataset, support: int, query: int) -> Episode:
    return Episode(
        ds.images[support][None], ds.masks[support][None], ds.images[query], ds.masks[query],
        int(ds.class_ids[query]), (int(support),), int(query),
    )


def sample_episode(ds: Dataset, fold: Fold, split: str, rng: np.random.Generator) -> Episode:
    """Uniform class from the split, then two distinct samples of it."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    pool = []
    for c in fold.classes(split):
        if len(ds.samples_of(c)) < 2:
            warn("class_too_small", f"class {c}")
            continue
        pool.append(c)
    if not pool:
        raise ValueError(f"{split} split of fold {fold.index} has no usable class")
    cls = pool[int(rng.integers(len(pool)))]
    s, q = rng.choice(ds.samples_of(cls), size=2, replace=False)
    return make_episode(ds, int(s), int(q))
