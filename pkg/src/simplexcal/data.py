"""Synthetic classification tasks, small-file ingestion, and splitting.

Generated tasks are the desk-scale stand-in for image benchmarks: every
split is drawn i.i.d. from the same known generative law under the task
seed, so partitions are fixed across trial seeds by construction.
"""

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DataError, FormatError, ParseError
from .numcore.rng import Rng

TASK_KINDS = ("gaussian-blobs", "overlapping-rings", "file")
SPLITS = ("train", "validation", "test")


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,) class indices
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ArgumentError("inputs must be (N, d) and labels (N,)")
        if len(self.inputs) != len(self.labels) or len(self.labels) < 1:
            raise DataError("inputs and labels must be nonempty and aligned")
        if self.class_count < 2:
            raise DataError("need at least two classes")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError("label out of range")
        if self.split not in SPLITS:
            raise ArgumentError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx: np.ndarray, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            self.inputs[idx], self.labels[idx], self.class_count, split or self.split
        )


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "gaussian-blobs"
    classes: int = 3
    dim: int = 2
    per_class: tuple = (1000, 333, 333)  # train/val/test samples per class
    overlap: float = 1.0
    seed: int = 7
    center_shift: float = 0.0  # rigid shift of the whole task (OOD construction)
    mean_radius: float = 2.0  # radius of the circle the class means sit on
    path: str | None = None  # 'file' kind: csv path
    label_column: str = "label"

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ArgumentError(f"unknown task kind {self.kind!r}")
        if self.classes < 2:
            raise ArgumentError("classes must be >= 2")
        if self.kind != "file":
            if self.dim < 2:
                raise ArgumentError("generated tasks need dim >= 2")
            if len(self.per_class) != 3 or any(c < 1 for c in self.per_class):
                raise ArgumentError("per_class must be three positive counts")
            if self.overlap < 0:
                raise ArgumentError("overlap must be >= 0")
        elif self.path is None:
            raise ArgumentError("file task requires a path")


def _gaussian_means(spec: TaskSpec) -> np.ndarray:
    """Class means on a circle in the first two coordinates."""
    means = np.zeros((spec.classes, spec.dim))
    angles = 2.0 * np.pi * np.arange(spec.classes) / spec.classes + np.pi / 2.0
    means[:, 0] = spec.mean_radius * np.cos(angles)
    means[:, 1] = spec.mean_radius * np.sin(angles)
    return means + spec.center_shift


def gen_gaussian_task(spec: TaskSpec):
    """Isotropic Gaussian clusters; ``overlap`` is the shared noise scale.

    Returns a (train, validation, test) triple drawn i.i.d. from the same law.
    """
    if spec.kind != "gaussian-blobs":
        raise ArgumentError("spec is not a gaussian-blobs task")
    means = _gaussian_means(spec)
    sigma = max(spec.overlap, 1e-6)
    streams = Rng(spec.seed).split(3)
    out = []
    for split, count, rng in zip(SPLITS, spec.per_class, streams):
        xs = np.vstack([
            means[k] + sigma * rng.normal((count, spec.dim)) for k in range(spec.classes)
        ])
        ys = np.repeat(np.arange(spec.classes), count)
        out.append(LabeledDataset(xs, ys, spec.classes, split))
    return tuple(out)


def gen_rings_task(spec: TaskSpec):
    """Concentric rings with radial noise; a second synthetic geometry."""
    if spec.kind != "overlapping-rings":
        raise ArgumentError("spec is not an overlapping-rings task")
    streams = Rng(spec.seed).split(3)
    sigma = 0.3 * max(spec.overlap, 1e-6)
    out = []
    for split, count, rng in zip(SPLITS, spec.per_class, streams):
        rows = []
        for k in range(spec.classes):
            radius = 1.5 * (k + 1) + sigma * rng.normal(count)
            theta = 2.0 * np.pi * rng.uniform(count)
            x = np.zeros((count, spec.dim))
            x[:, 0] = radius * np.cos(theta)
            x[:, 1] = radius * np.sin(theta)
            if spec.dim > 2:
                x[:, 2:] = 0.05 * rng.normal((count, spec.dim - 2))
            rows.append(x + spec.center_shift)
        xs = np.vstack(rows)
        ys = np.repeat(np.arange(spec.classes), count)
        out.append(LabeledDataset(xs, ys, spec.classes, split))
    return tuple(out)


def gen_task(spec: TaskSpec):
    if spec.kind == "gaussian-blobs":
        return gen_gaussian_task(spec)
    if spec.kind == "overlapping-rings":
        return gen_rings_task(spec)
    raise ArgumentError(f"cannot generate task of kind {spec.kind!r}")


def bayes_accuracy(spec: TaskSpec, n: int, rng: Rng) -> float:
    """Monte-Carlo Bayes accuracy of a gaussian-blobs mixture.

    Equal priors and isotropic shared covariance make the Bayes rule
    nearest-mean; this integrates that rule over the known mixture.
    """
    if spec.kind != "gaussian-blobs":
        raise ArgumentError("Bayes oracle only defined for gaussian-blobs")
    means = _gaussian_means(spec)
    sigma = max(spec.overlap, 1e-6)
    per = n // spec.classes
    hits = 0
    for k in range(spec.classes):
        xs = means[k] + sigma * rng.normal((per, spec.dim))
        d2 = ((xs[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        hits += int(np.sum(np.argmin(d2, axis=1) == k))
    return hits / (per * spec.classes)


def split(dataset: LabeledDataset, fractions, seed: int):
    """Seeded disjoint (train, validation, test) split.

    Covers the whole index range when the fractions sum to 1; the split seed
    is deliberately separate from any trial seed so partitions stay fixed
    across trials.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ArgumentError("need three positive fractions")
    if sum(fractions) > 1.0 + 1e-9:
        raise ArgumentError("fractions must sum to <= 1")
    n = len(dataset)
    sizes = [int(f * n) for f in fractions[:2]]
    if abs(sum(fractions) - 1.0) <= 1e-9:
        sizes.append(n - sum(sizes))
    else:
        sizes.append(int(fractions[2] * n))
    if any(s < 1 for s in sizes):
        raise ArgumentError(f"split sizes {sizes} include an empty split")
    order = Rng(seed).permutation(n)
    parts = []
    start = 0
    for size, tag in zip(sizes, SPLITS):
        parts.append(dataset.subset(order[start : start + size], tag))
        start += size
    return tuple(parts)


@dataclass(frozen=True)
class CsvSchema:
    feature_columns: tuple | None = None  # None: every non-label column, file order
    label_column: str = "label"
    class_count: int | None = None  # None: inferred as max label + 1


def load_csv(path: str, schema: CsvSchema = CsvSchema()) -> LabeledDataset:
    """Parse a header-rowed CSV of numeric features plus an integer label."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file") from None
        header = [h.strip() for h in header]
        if schema.label_column not in header:
            raise ParseError(f"missing label column {schema.label_column!r}")
        feats = list(schema.feature_columns) if schema.feature_columns else [
            h for h in header if h != schema.label_column
        ]
        missing = [c for c in feats if c not in header]
        if missing:
            raise ParseError(f"missing feature columns {missing}")
        fidx = [header.index(c) for c in feats]
        lidx = header.index(schema.label_column)

        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[i]) for i in fidx])
                labels.append(int(row[lidx]))
            except (ValueError, IndexError) as exc:
                raise ParseError(str(exc), row=lineno) from exc
    if not rows:
        raise DataError("csv holds no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0:
        raise DataError("negative class label")
    k = schema.class_count if schema.class_count is not None else int(labels.max()) + 1
    if labels.max() >= k:
        raise DataError(f"label {labels.max()} >= class count {k}")
    return LabeledDataset(np.asarray(rows), labels, k, "train")


def standardize_splits(train: LabeledDataset, val: LabeledDataset, test: LabeledDataset):
    """Column-standardize all splits using train-split statistics only."""
    mean = train.inputs.mean(axis=0)
    std = train.inputs.std(axis=0)
    std = np.where(std > 0, std, 1.0)

    def tx(ds: LabeledDataset) -> LabeledDataset:
        return LabeledDataset((ds.inputs - mean) / std, ds.labels, ds.class_count, ds.split)

    return tx(train), tx(val), tx(test)


_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path: str, magic: int, ndim: int) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4 + 4 * ndim)
        if len(head) < 4 + 4 * ndim:
            raise FormatError(f"{path}: truncated header")
        got_magic = struct.unpack(">I", head[:4])[0]
        if got_magic != magic:
            raise FormatError(f"{path}: bad magic {got_magic:#010x}, expected {magic:#010x}")
        dims = struct.unpack(f">{ndim}I", head[4:])
        count = int(np.prod(dims))
        body = fh.read(count)
        if len(body) < count:
            raise FormatError(f"{path}: truncated body ({len(body)} of {count} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path: str, labels_path: str) -> LabeledDataset:
    """Load an IDX image/label file pair; pixels scaled to [0, 1]."""
    images = _read_idx(images_path, _IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, _IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    k = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(flat, labels.astype(np.int64), max(k, 2), "train")
