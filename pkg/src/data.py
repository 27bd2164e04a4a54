"""
Datasets and their sources: IDX image files, the internal CSV form, and
synthetic Gaussian blobs, plus the rotation + noise perturbation pass.
"""

import csv
import gzip
import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Literal, Optional

import numpy as np
from scipy import ndimage

from .errors import FormatError, ParameterError, ShapeError
from .nn import Sample
from .utils import format_float_row

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

Split = Literal["train", "test"]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix (n, d) with integer labels.

    `flagged_ids` lists the samples a run expects to be uncertain: label
    noise injected by `synth_blobs` and images altered by `perturb`.
    Equality compares features, labels and class count only.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split: Split = "train"
    image_shape: Optional[tuple[int, ...]] = None
    flagged_ids: tuple[int, ...] = ()

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ShapeError(f"a dataset needs a nonempty (n, d) matrix, got {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ShapeError(f"{labels.shape[0]} labels for {features.shape[0]} samples")
        if self.class_count < 2:
            raise ParameterError("class_count must be at least 2")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ParameterError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(features)):
            raise FormatError("dataset features must be finite")
        if self.image_shape is not None and math.prod(self.image_shape) != features.shape[1]:
            raise ShapeError(f"image shape {self.image_shape} does not cover {features.shape[1]} features")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "flagged_ids", tuple(sorted(int(i) for i in self.flagged_ids)))

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def sample(self, index: int) -> Sample:
        return Sample(self.features[index], int(self.labels[index]))

    def subset(self, ids: list[int]) -> "Dataset":
        position = {sample_id: k for k, sample_id in enumerate(ids)}
        return replace(
            self,
            features=self.features[ids],
            labels=self.labels[ids],
            flagged_ids=tuple(position[i] for i in self.flagged_ids if i in position),
        )


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _idx_header(data: bytes, magic: int, dims: int, what: str) -> tuple[int, ...]:
    header_size = 4 * (dims + 1)
    if len(data) < header_size:
        raise FormatError(f"{what} file too short for its IDX header", offset=len(data))
    found, *sizes = struct.unpack(f">{dims + 1}I", data[:header_size])
    if found != magic:
        raise FormatError(f"bad {what} magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    if any(size == 0 for size in sizes[1:]):
        raise FormatError(f"{what} file declares a zero dimension", offset=8)
    expected = header_size + math.prod(sizes)
    if len(data) < expected:
        raise FormatError(
            f"{what} file truncated: {len(data)} bytes, header promises {expected}",
            offset=len(data),
        )
    return tuple(sizes)


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    limit: Optional[int] = None,
    class_count: int = 10,
    split: Split = "train",
) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    image_bytes = _read_bytes(images_path)
    label_bytes = _read_bytes(labels_path)
    count, rows, cols = _idx_header(image_bytes, IDX_IMAGES_MAGIC, 3, "image")
    (label_count,) = _idx_header(label_bytes, IDX_LABELS_MAGIC, 1, "label")
    if label_count != count:
        raise FormatError(f"{label_count} labels for {count} images", offset=4)

    n = count if limit is None else min(count, limit)
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=n, offset=8)
    if labels.size and int(labels.max()) >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise FormatError(f"label {labels[bad]} exceeds class count {class_count}", offset=8 + bad)
    logger.info("Loaded %d IDX images of %dx%d from %s", n, rows, cols, images_path)
    return Dataset(
        features=pixels.reshape(n, rows * cols).astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
        class_count=class_count,
        split=split,
        image_shape=(rows, cols),
    )


def blob_centers(classes: int, dim: int, radius: float = 4.0) -> np.ndarray:
    """Class centers evenly spaced on a circle in the first two feature axes."""
    angles = 2.0 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def synth_blobs(
    n: int,
    classes: int,
    noise_sigma: float,
    label_noise_rate: float,
    seed: int,
    dim: int = 2,
    radius: float = 4.0,
    split: Split = "train",
) -> Dataset:
    """Gaussian class blobs; a `label_noise_rate` share of labels is reassigned
    to a different class and recorded in `flagged_ids`."""
    if classes < 2 or n < classes:
        raise ParameterError(f"need classes >= 2 and n >= classes, got n={n}, classes={classes}")
    if dim < 2 or noise_sigma < 0 or not 0.0 <= label_noise_rate <= 1.0:
        raise ParameterError("need dim >= 2, noise_sigma >= 0 and label_noise_rate in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    features = blob_centers(classes, dim, radius)[labels] + noise_sigma * rng.standard_normal((n, dim))

    noised = np.sort(rng.choice(n, size=int(round(label_noise_rate * n)), replace=False))
    noisy_labels = labels.copy()
    noisy_labels[noised] = (labels[noised] + rng.integers(1, classes, size=noised.size)) % classes
    return Dataset(
        features=features,
        labels=noisy_labels,
        class_count=classes,
        split=split,
        flagged_ids=tuple(noised.tolist()),
    )


def _square_shape(dataset: Dataset) -> tuple[int, ...]:
    shape = dataset.image_shape
    if shape is None:
        side = math.isqrt(dataset.feature_dim)
        shape = (side, side)
    if shape[0] != shape[1] or math.prod(shape) != dataset.feature_dim:
        raise ShapeError(f"perturbation needs square images, got shape {shape}")
    return shape


def perturb(
    dataset: Dataset,
    fraction: float,
    rotation_max_deg: float,
    noise_sigma: float,
    seed: int,
) -> tuple[Dataset, list[int]]:
    """Rotate (bilinear, edge-clamped) and noise a random `fraction` of the images.

    Samples that are not selected keep their exact bytes.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"perturbation fraction {fraction} must lie in [0, 1]")
    if rotation_max_deg < 0 or noise_sigma < 0:
        raise ParameterError("rotation_max_deg and noise_sigma must be nonnegative")
    shape = _square_shape(dataset)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    ids = sorted(rng.choice(n, size=int(round(fraction * n)), replace=False).tolist())

    features = dataset.features.copy()
    for i in ids:
        image = features[i].reshape(shape)
        angle = rng.uniform(-rotation_max_deg, rotation_max_deg)
        if angle != 0.0:
            image = ndimage.rotate(image, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
        if noise_sigma > 0.0:
            image = np.clip(image + rng.normal(0.0, noise_sigma, size=image.shape), 0.0, 1.0)
        features[i] = image.reshape(-1)
    logger.info("Perturbed %d of %d samples", len(ids), n)
    flagged = set(dataset.flagged_ids) | set(ids)
    return replace(dataset, features=features, image_shape=shape, flagged_ids=tuple(flagged)), ids


def save_csv(dataset: Dataset, path: str | Path) -> None:
    """Internal CSV form: `label,f0..f{d-1}`, floats written with repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["label"] + [f"f{j}" for j in range(dataset.feature_dim)])
        for features, label in zip(dataset.features, dataset.labels):
            writer.writerow([int(label)] + format_float_row(features))


def load_csv(
    path: str | Path,
    class_count: Optional[int] = None,
    image_shape: Optional[tuple[int, ...]] = None,
    split: Split = "test",
    limit: Optional[int] = None,
) -> Dataset:
    """Load the internal CSV form; also the path for pre-flattened CIFAR-10 exports."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
            raise FormatError(f"{path}: header must be label,f0..f{{d-1}}", offset=0)
        labels: list[int] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if limit is not None and len(rows) >= limit:
                break
            if len(row) != len(header):
                raise FormatError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as e:
                raise FormatError(f"{path}:{line_no}: {e}") from e
    if not rows:
        raise FormatError(f"{path}: no samples")
    if class_count is None:
        class_count = max(2, max(labels) + 1)
    return Dataset(
        features=np.array(rows, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        class_count=class_count,
        split=split,
        image_shape=image_shape,
    )
