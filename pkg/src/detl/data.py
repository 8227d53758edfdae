"""Datasets: synthetic chest-film caricatures, PGM ingestion, augmentation, splits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .pnm import PNMError, read_pgm, write_pgm

SOURCE_CLASSES = ("normal", "diseased")
TARGET_CLASSES = ("normal", "pneumonia", "other_disease", "covid19")
DISEASE_SIGNATURES = ("pneumonia", "other_disease", "covid19")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    label: int
    id: str


@dataclass
class LabeledDataset:
    samples: list[Sample]
    class_names: tuple[str, ...]
    provenance: str = "synthetic"

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("sample ids must be unique")
        for s in self.samples:
            if not 0 <= s.label < len(self.class_names):
                raise DatasetError(f"sample {s.id} has label {s.label} outside {self.class_names}")

    def __len__(self) -> int:
        return len(self.samples)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels(), minlength=len(self.class_names))

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def images(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 1, 0, 0), dtype=np.float32)
        return np.stack([s.image for s in self.samples])

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def subset(self, indices) -> "LabeledDataset":
        return LabeledDataset([self.samples[i] for i in indices], self.class_names, self.provenance)

    def find(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise DatasetError(f"unknown sample id {sample_id!r}")


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 256 levels an 8-bit PGM can hold."""
    return from_bytes(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8))


def from_bytes(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- synthetic generator -------------------------------------------------------

def _blob(yy, xx, cy, cx, sigma):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))


def _smooth_noise(rng, size, sigma_px):
    return ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma_px, mode="reflect")


def _point_in_lung(rng, lung, lower=False, peripheral=False):
    cy, cx, ry, rx, side = lung
    while True:
        u = rng.uniform(-1.0, 1.0)
        v = rng.uniform(0.1, 0.85) if lower else rng.uniform(-0.8, 0.8)
        if peripheral:
            u = side * rng.uniform(0.45, 0.85)
        if u * u + v * v <= 0.8:
            return cy + v * ry, cx + u * rx


def render_film(signature: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic frontal film: body, two dark lung fields, and a class-specific lesion pattern."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    jitter = lambda s: rng.uniform(-s, s)  # noqa: E731
    body = 1.0 / (1.0 + np.exp(-(0.42 - np.hypot((yy - 0.55) / 1.1, xx - 0.5)) * 40.0))
    img = 0.08 + (0.5 + jitter(0.05)) * body
    lungs = []
    lung_mask = np.zeros_like(yy)
    for side, cx0 in ((-1, 0.32), (1, 0.68)):
        cy, cx = 0.5 + jitter(0.02), cx0 + jitter(0.02)
        ry, rx = 0.28 * (1 + jitter(0.08)), 0.13 * (1 + jitter(0.08))
        r = np.hypot((yy - cy) / ry, (xx - cx) / rx)
        lung_mask = np.maximum(lung_mask, 1.0 / (1.0 + np.exp((r - 1.0) * 12.0)))
        lungs.append((cy, cx, ry, rx, side))
    img = img - (0.3 + jitter(0.04)) * lung_mask
    img = img + 0.12 * _blob(yy, xx, 0.45, 0.5, 0.05) * (1 - lung_mask)

    lesion = np.zeros_like(yy)
    if signature == "pneumonia":
        for _ in range(rng.integers(1, 4)):
            cy, cx = _point_in_lung(rng, lungs[rng.integers(2)])
            patch = 0.7 + 0.3 * np.tanh(_smooth_noise(rng, size, size / 32) * 3)
            lesion += rng.uniform(0.3, 0.45) * _blob(yy, xx, cy, cx, rng.uniform(0.06, 0.09)) * patch
    elif signature == "covid19":
        for _ in range(rng.integers(5, 10)):
            cy, cx = _point_in_lung(rng, lungs[rng.integers(2)], lower=True, peripheral=True)
            lesion += rng.uniform(0.1, 0.17) * _blob(yy, xx, cy, cx, rng.uniform(0.03, 0.05))
        lesion += 0.05 * np.clip((yy - 0.5) * 3, 0, 1)
    elif signature == "other_disease":
        cy, cx = _point_in_lung(rng, lungs[rng.integers(2)])
        lesion += rng.uniform(0.6, 0.75) * _blob(yy, xx, cy, cx, rng.uniform(0.015, 0.025))
    elif signature != "normal":
        raise DatasetError(f"unknown signature {signature!r}")
    img = img + lesion * lung_mask
    img = img + 0.015 * rng.standard_normal(img.shape)
    return quantize(img)[None].astype(np.float32)


def generate_synthetic(counts: Sequence[int], image_size: int = 64, seed: int = 0,
                       class_names: Optional[Sequence[str]] = None) -> LabeledDataset:
    """Deterministic dataset with ``counts[k]`` samples of class ``k``.

    Two counts select the binary normal/diseased task, where diseased films
    cycle through the three lesion signatures; four counts select the
    normal/pneumonia/other_disease/covid19 task.
    """
    counts = [int(c) for c in counts]
    if class_names is None:
        class_names = {2: SOURCE_CLASSES, 4: TARGET_CLASSES}.get(len(counts))
        if class_names is None:
            raise DatasetError("counts must have 2 (binary) or 4 (four-class) entries")
    class_names = tuple(class_names)
    if len(counts) != len(class_names):
        raise DatasetError("one count per class is required")
    if any(c < 0 for c in counts):
        raise DatasetError("class counts must be non-negative")
    if image_size < 32:
        raise DatasetError("image_size must be at least 32")
    samples = []
    for k, (name, n) in enumerate(zip(class_names, counts)):
        for i in range(n):
            # the class-count salt keeps binary and four-class films distinct under one seed
            rng = np.random.default_rng((seed, len(class_names), k, i))
            if name == "diseased":
                signature = DISEASE_SIGNATURES[i % 3]
            else:
                signature = name
            samples.append(Sample(render_film(signature, image_size, rng), k, f"{name}_{i:05d}"))
    return LabeledDataset(samples, class_names, "synthetic")


# -- on-disk format ------------------------------------------------------------

def write_dataset(dataset: LabeledDataset, root, labels_file: str = "labels.csv") -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / labels_file, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "path", "class"])
        for s in dataset.samples:
            rel = f"images/{s.id}.pgm"
            write_pgm(root / rel, to_bytes(s.image[0]))
            w.writerow([s.id, rel, dataset.class_names[s.label]])
    return root


def resize_nearest(pixels: np.ndarray, size: int) -> np.ndarray:
    h, w = pixels.shape
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return pixels[rows[:, None], cols[None, :]]


def ingest_directory(root, labels_file: str = "labels.csv", class_names: Optional[Sequence[str]] = None,
                     image_size: Optional[int] = None) -> LabeledDataset:
    """Load a ``labels.csv`` (``id,path,class``) plus 8-bit PGM images."""
    root = Path(root)
    labels_path = root / labels_file
    if not labels_path.is_file():
        raise DatasetError(f"labels file not found: {labels_path}")
    rows = []
    with open(labels_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "path", "class"]:
            raise DatasetError(f"{labels_path}:1: header must be 'id,path,class'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 or not all(field.strip() for field in row):
                raise DatasetError(f"{labels_path}:{lineno}: malformed row {row!r}")
            rows.append((lineno, *[field.strip() for field in row]))

    if class_names is None:
        seen = {r[3] for r in rows}
        class_names = SOURCE_CLASSES if seen <= set(SOURCE_CLASSES) else TARGET_CLASSES
    class_names = tuple(class_names)
    index = {name: k for k, name in enumerate(class_names)}

    samples = []
    for lineno, sid, rel, cls in rows:
        if cls not in index:
            raise DatasetError(f"{labels_path}:{lineno}: unknown class {cls!r}")
        path = root / rel
        if not path.is_file():
            raise DatasetError(f"{labels_path}:{lineno}: image file not found: {path}")
        try:
            pixels = read_pgm(path)
        except PNMError as exc:
            raise DatasetError(f"{labels_path}:{lineno}: {exc}") from exc
        if image_size is not None and pixels.shape != (image_size, image_size):
            pixels = resize_nearest(pixels, image_size)
        samples.append(Sample(from_bytes(pixels)[None], index[cls], sid))
    return LabeledDataset(samples, class_names, "ingested")


# -- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    rotation: float = 15.0
    scale: tuple[float, float] = (0.9, 1.1)
    mirror_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.rotation < 0:
            raise ValueError("rotation range must be non-negative")
        lo, hi = self.scale
        if not 0 < lo <= 1.0 <= hi:
            raise ValueError("scale range must bracket 1")
        if not 0.0 <= self.mirror_p <= 1.0:
            raise ValueError("mirror probability must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(rotation=0.0, scale=(1.0, 1.0), mirror_p=0.0)


def mirror(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def rotate_scale(image: np.ndarray, degrees: float, scale: float) -> np.ndarray:
    """Rotate by ``degrees`` and scale isotropically about the centre; bilinear, zero fill."""
    if degrees == 0.0 and scale == 1.0:
        return image.copy()
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    # output -> input coordinate map in (row, col) order
    matrix = np.array([[c, s], [-s, c]]) / scale
    out = np.empty_like(image)
    for ch in range(image.shape[0]):
        plane = image[ch]
        center = (np.array(plane.shape, dtype=np.float64) - 1.0) / 2.0
        offset = center - matrix @ center
        out[ch] = ndimage.affine_transform(plane, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def augment_image(image: np.ndarray, policy: AugmentationPolicy, draw: np.random.Generator) -> np.ndarray:
    # three draws per image regardless of policy keep streams aligned across policies
    degrees = draw.uniform(-policy.rotation, policy.rotation)
    scale = draw.uniform(*policy.scale)
    flip = draw.random() < policy.mirror_p
    out = rotate_scale(image, float(degrees), float(scale))
    return mirror(out) if flip else out


def augment(sample: Sample, policy: AugmentationPolicy, draw: np.random.Generator) -> Sample:
    return Sample(augment_image(sample.image, policy, draw), sample.label, sample.id)


def epoch_stream(policy: AugmentationPolicy, epoch: int) -> np.random.Generator:
    return np.random.default_rng((policy.seed, epoch))


def augment_batch(images: np.ndarray, policy: AugmentationPolicy, draw: np.random.Generator) -> np.ndarray:
    return np.stack([augment_image(img, policy, draw) for img in images]) if len(images) else images


# -- splits --------------------------------------------------------------------

@dataclass
class FoldPlan:
    assignment: np.ndarray  # fold index per sample
    k: int
    labels: np.ndarray = field(repr=False)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def class_sizes(self) -> np.ndarray:
        """``[k, C]`` table of per-fold class counts."""
        ncls = int(self.labels.max()) + 1 if self.labels.size else 0
        table = np.zeros((self.k, ncls), dtype=np.int64)
        np.add.at(table, (self.assignment, self.labels), 1)
        return table


def stratified_folds(dataset: LabeledDataset, k: int, seed: int = 0) -> FoldPlan:
    """Assign each sample to one of ``k`` folds, balancing every class and the fold totals."""
    if k < 1:
        raise ValueError("k must be positive")
    labels = dataset.labels()
    counts = np.bincount(labels, minlength=len(dataset.class_names))
    for name, n in zip(dataset.class_names, counts):
        if 0 < n < k:
            raise DatasetError(f"class {name!r} has {n} samples, fewer than k={k}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(labels), dtype=np.int64)
    cursor = 0
    for cls in range(len(dataset.class_names)):
        members = rng.permutation(np.flatnonzero(labels == cls))
        # dealing continues across classes so fold totals also differ by at most one
        assignment[members] = (cursor + np.arange(members.size)) % k
        cursor = (cursor + members.size) % k
    return FoldPlan(assignment, k, labels)


def balanced_holdout(dataset: LabeledDataset, per_class_n: int, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Draw exactly ``per_class_n`` samples of every class for validation; the rest train."""
    labels = dataset.labels()
    rng = np.random.default_rng(seed)
    val = []
    for cls, name in enumerate(dataset.class_names):
        members = np.flatnonzero(labels == cls)
        if members.size < per_class_n:
            raise DatasetError(f"class {name!r} has {members.size} samples, need {per_class_n}")
        val.extend(rng.choice(members, size=per_class_n, replace=False).tolist())
    val_set = set(val)
    train = [i for i in range(len(dataset)) if i not in val_set]
    return dataset.subset(train), dataset.subset(sorted(val))

