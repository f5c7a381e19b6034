"""Teaching-dataset preparation.

Covers the data plumbing in front of the oracle: preprocessing raw image
files into format-conforming batches, labeling them through a sealed
oracle handle, shuffled train/test splitting and fractional subsampling
for dataset-size sweeps.

On disk a dataset is a flat directory of image files plus a manifest CSV
(`path,label` for labeled sets, `path` for raw sets, paths relative to
the manifest location). Labels live only in manifests.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, FormatError

log = logging.getLogger(__name__)


def round_half_up(x):
    """Rounding rule for split/subsample sizes (0.5 goes up)."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class InputFormat:
    """Image format a model consumes: HxW pixels, 1 or 3 channels, floats in [0,1]."""

    height: int
    width: int
    channels: int

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigurationError(
                f"input format must be at least 8x8, got {self.height}x{self.width}"
            )
        if self.channels not in (1, 3):
            raise ConfigurationError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def shape(self):
        return (self.channels, self.height, self.width)

    def to_dict(self):
        return {"height": self.height, "width": self.width, "channels": self.channels}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["height"]), int(d["width"]), int(d["channels"]))


class ImageBatch:
    """Rank-4 float array of images, shape (count, channels, height, width).

    Pixel values are floats in [0,1]. `paths` optionally records where each
    image came from, in order.
    """

    def __init__(self, data, paths=None):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 4:
            raise FormatError(f"image batch must be rank 4, got shape {data.shape}")
        if paths is not None and len(paths) != data.shape[0]:
            raise DataError("paths length does not match batch size")
        self.data = data
        self.paths = list(paths) if paths is not None else None

    @property
    def count(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[2]

    @property
    def width(self):
        return self.data.shape[3]

    def __len__(self):
        return self.count

    def conforms(self, fmt: InputFormat):
        return self.data.shape[1:] == fmt.shape

    def check_pixels(self):
        """Raise DataError unless all pixels are finite and inside [0,1]."""
        if not np.isfinite(self.data).all():
            raise DataError("image batch contains non-finite pixels")
        lo, hi = float(self.data.min(initial=0.0)), float(self.data.max(initial=1.0))
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"pixels outside [0,1]: min={lo}, max={hi}")

    def subset(self, indices):
        paths = [self.paths[i] for i in indices] if self.paths is not None else None
        return ImageBatch(self.data[np.asarray(indices, dtype=np.int64)], paths)


@dataclass
class RawDataset:
    """Unlabeled image references (the corpus fed to the oracle for labeling)."""

    paths: list
    source: str = "public-dataset"  # public-dataset | crawled | synthetic

    def __len__(self):
        return len(self.paths)


@dataclass
class LabeledDataset:
    """Image references paired with integer class labels.

    `provenance` records where labels came from ("ground-truth", a synthetic
    corpus tag, or "oracle:<run id>"). When the dataset was just labeled or
    decoded in memory, `images` caches the pixel batch aligned with `refs`.
    """

    refs: list
    labels: np.ndarray
    format: InputFormat
    provenance: str = ""
    images: ImageBatch | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.refs) != len(self.labels):
            raise DataError("one label per image required")
        if self.images is not None and self.images.count != len(self.refs):
            raise DataError("cached images do not match manifest size")
        if len(self.labels) and self.labels.min() < 0:
            raise DataError("labels must be non-negative")

    def __len__(self):
        return len(self.refs)

    def subset(self, indices):
        indices = list(indices)
        return LabeledDataset(
            refs=[self.refs[i] for i in indices],
            labels=self.labels[np.asarray(indices, dtype=np.int64)],
            format=self.format,
            provenance=self.provenance,
            images=self.images.subset(indices) if self.images is not None else None,
        )

    def materialize(self, root=None):
        """Return (ImageBatch, labels); decodes referenced files if not cached."""
        if self.images is None:
            raw = RawDataset(
                [os.path.join(root, r) if root else r for r in self.refs],
                source="public-dataset",
            )
            batch, skipped = preprocess(raw, self.format)
            if skipped:
                raise DataError(f"labeled dataset has undecodable images: {skipped}")
            self.images = ImageBatch(batch.data, self.refs)
        return self.images, self.labels


@dataclass(frozen=True)
class SplitConfig:
    train_ratio: float = 0.8
    shuffle_seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.train_ratio < 1.0):
            raise ConfigurationError(f"train_ratio must be in (0,1), got {self.train_ratio}")


def _decode(path, fmt: InputFormat):
    with Image.open(path) as im:
        im = im.convert("L" if fmt.channels == 1 else "RGB")
        if im.size != (fmt.width, fmt.height):
            im = im.resize((fmt.width, fmt.height), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if fmt.channels == 1:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def preprocess(raw: RawDataset, fmt: InputFormat):
    """Decode and resize raw images into a format-conforming batch.

    Returns (batch, skipped_paths). Undecodable files are skipped with a
    warning and reported in `skipped_paths`; order of decodable images is
    preserved. Raises DataError if the raw set is empty or nothing decodes.
    """
    if not raw.paths:
        raise DataError("raw dataset is empty")
    arrays, kept, skipped = [], [], []
    for path in raw.paths:
        try:
            arrays.append(_decode(path, fmt))
            kept.append(path)
        except Exception as exc:  # undecodable image
            log.warning("skipping undecodable image %s: %s", path, exc)
            skipped.append(path)
    if not arrays:
        raise DataError("no decodable images in raw dataset")
    batch = ImageBatch(np.stack(arrays), kept)
    batch.check_pixels()
    return batch, skipped


def label_with_oracle(oracle, images: ImageBatch, run_id="oracle"):
    """Label a batch through the sealed oracle's top-1 query interface."""
    if not images.conforms(oracle.input_format):
        raise FormatError(
            f"batch shape {images.data.shape[1:]} does not match "
            f"oracle format {oracle.input_format.shape}"
        )
    labels = oracle.query_top1(images)
    refs = images.paths if images.paths is not None else [f"mem://{i}" for i in range(images.count)]
    return LabeledDataset(
        refs=list(refs),
        labels=np.asarray(labels, dtype=np.int64),
        format=oracle.input_format,
        provenance=f"oracle:{run_id}",
        images=images,
    )


def split(dataset: LabeledDataset, config: SplitConfig):
    """Shuffle, then partition into train/test at the configured ratio.

    Train side takes round-half-up of ratio*n. Deterministic per seed.
    """
    n = len(dataset)
    if n < 5:
        raise ConfigurationError(f"dataset too small to split: {n} < 5")
    rng = np.random.default_rng(config.shuffle_seed)
    perm = rng.permutation(n)
    n_train = round_half_up(config.train_ratio * n)
    if n_train == 0 or n_train == n:
        raise ConfigurationError("split ratio leaves an empty side")
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


def subsample(train: LabeledDataset, fraction, seed=0):
    """Sample a fraction of the training set without replacement.

    Keeps round-half-up of fraction*n items; fraction 1.0 returns the input
    unchanged. Deterministic per seed; kept items preserve manifest order.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigurationError(f"fraction must be in (0,1], got {fraction}")
    if fraction == 1.0:
        return train
    n = len(train)
    k = round_half_up(fraction * n)
    if k < 1:
        raise ConfigurationError(f"fraction {fraction} of {n} items leaves an empty set")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.permutation(n)[:k])
    return train.subset(picked)


def class_histogram(dataset: LabeledDataset, num_classes=None):
    k = int(num_classes if num_classes is not None else dataset.labels.max() + 1)
    return np.bincount(dataset.labels, minlength=k)


# ---------------------------------------------------------------------------
# manifest IO


def _relativize(ref, manifest_path):
    if os.path.isabs(ref):
        return os.path.relpath(ref, os.path.dirname(os.path.abspath(manifest_path)))
    return ref


def write_labeled_manifest(dataset: LabeledDataset, manifest_path):
    os.makedirs(os.path.dirname(os.path.abspath(manifest_path)), exist_ok=True)
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        for ref, label in zip(dataset.refs, dataset.labels):
            writer.writerow([_relativize(ref, manifest_path), int(label)])


def read_labeled_manifest(manifest_path, fmt: InputFormat, provenance=""):
    refs, labels = [], []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "path" not in reader.fieldnames or "label" not in reader.fieldnames:
            raise DataError(f"{manifest_path}: expected header path,label")
        for row in reader:
            refs.append(row["path"])
            labels.append(int(row["label"]))
    root = os.path.dirname(os.path.abspath(manifest_path))
    refs = [os.path.join(root, r) for r in refs]
    return LabeledDataset(refs, np.asarray(labels, dtype=np.int64), fmt, provenance)


def write_raw_manifest(raw: RawDataset, manifest_path):
    os.makedirs(os.path.dirname(os.path.abspath(manifest_path)), exist_ok=True)
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path"])
        for ref in raw.paths:
            writer.writerow([_relativize(ref, manifest_path)])


def read_raw_manifest(manifest_path, source="public-dataset"):
    paths = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "path" not in reader.fieldnames:
            raise DataError(f"{manifest_path}: expected header path")
        for row in reader:
            paths.append(row["path"])
    root = os.path.dirname(os.path.abspath(manifest_path))
    return RawDataset([os.path.join(root, p) for p in paths], source=source)
