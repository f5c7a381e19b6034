"""Desk-scale teacher models sealed behind a label-only query interface.

The teacher plays the victim classifier. After ``seal`` the rest of the
pipeline can interact with it only through :class:`OracleHandle`, whose
public surface is exactly ``query_top1``, ``query_count``, ``class_count``
and ``input_format`` — no weights, logits or layer structure. Every query
is counted, so tests can assert the black-box budget exactly.
"""

from __future__ import annotations

import copy
import json
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ._torch import argmax_labels, epoch_permutations, to_tensor
from .datasets import ImageBatch, InputFormat, LabeledDataset
from .errors import ConfigurationError, DataError, FormatError

_TEACHER_EPOCHS = 20
_TEACHER_BATCH = 64
_TEACHER_LR = 1e-3
_HELDOUT_FRACTION = 0.1


class _ConvNet(nn.Module):
    """Conv-BN-ReLU-pool blocks followed by a linear head."""

    def __init__(self, widths, fmt: InputFormat, num_classes):
        super().__init__()
        layers = []
        in_ch = fmt.channels
        h, w = fmt.height, fmt.width
        for out_ch in widths:
            layers += [
                nn.Conv2d(in_ch, out_ch, 3, padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ]
            in_ch = out_ch
            h, w = h // 2, w // 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch * h * w, num_classes)

    def forward(self, x):
        x = self.features(x)
        return self.head(x.flatten(1))


TEACHER_CATALOG = {
    "convnet2": (16, 32),
    "convnet3": (16, 32, 64),
    "convnet2w": (32, 64),
}


@dataclass(frozen=True)
class TeacherSpec:
    architecture_id: str
    num_classes: int
    input_format: InputFormat
    train_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.architecture_id not in TEACHER_CATALOG:
            raise ConfigurationError(
                f"unknown teacher architecture {self.architecture_id!r}; "
                f"catalog: {sorted(TEACHER_CATALOG)}"
            )


@dataclass
class TeacherArtifact:
    """A trained teacher plus its recorded held-out accuracy."""

    net: nn.Module
    spec: TeacherSpec
    heldout_accuracy: float

    def manifest_record(self):
        return {
            "architecture_id": self.spec.architecture_id,
            "num_classes": self.spec.num_classes,
            "input_format": self.spec.input_format.to_dict(),
            "train_seed": self.spec.train_seed,
            "heldout_accuracy": self.heldout_accuracy,
        }

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        torch.save(self.net.state_dict(), os.path.join(directory, "model.pt"))
        with open(os.path.join(directory, "teacher.json"), "w", encoding="utf-8") as fh:
            json.dump(self.manifest_record(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory):
        path = os.path.join(directory, "teacher.json")
        if not os.path.exists(path):
            raise DataError(f"no teacher artifact at {directory}")
        with open(path, encoding="utf-8") as fh:
            rec = json.load(fh)
        spec = TeacherSpec(
            rec["architecture_id"],
            int(rec["num_classes"]),
            InputFormat.from_dict(rec["input_format"]),
            int(rec["train_seed"]),
        )
        net = _ConvNet(TEACHER_CATALOG[spec.architecture_id], spec.input_format, spec.num_classes)
        net.load_state_dict(torch.load(os.path.join(directory, "model.pt"), weights_only=True))
        net.eval()
        return cls(net, spec, float(rec["heldout_accuracy"]))


def build_teacher(spec: TeacherSpec, train_data: LabeledDataset) -> TeacherArtifact:
    """Train a catalog teacher on ground-truth-labeled data.

    A fixed fraction is held out (by train_seed) and the accuracy on it is
    recorded on the artifact. Deterministic for a fixed train_seed.
    """
    if len(train_data) == 0:
        raise ConfigurationError("cannot build a teacher from an empty dataset")
    images, labels = train_data.materialize()
    if labels.max() >= spec.num_classes or labels.min() < 0:
        raise DataError(
            f"labels outside [0, {spec.num_classes}): "
            f"min={labels.min()}, max={labels.max()}"
        )
    images.check_pixels()
    if not images.conforms(spec.input_format):
        raise FormatError(
            f"training images {images.data.shape[1:]} do not match "
            f"teacher format {spec.input_format.shape}"
        )

    n = len(train_data)
    rng = np.random.default_rng(spec.train_seed)
    perm = rng.permutation(n)
    n_held = max(1, int(round(_HELDOUT_FRACTION * n)))
    held_idx, fit_idx = perm[:n_held], perm[n_held:]
    if len(fit_idx) == 0:
        raise ConfigurationError("dataset too small to hold out a validation slice")

    torch.manual_seed(spec.train_seed)
    net = _ConvNet(TEACHER_CATALOG[spec.architecture_id], spec.input_format, spec.num_classes)
    xs = to_tensor(images)[torch.from_numpy(fit_idx.copy())]
    ys = torch.from_numpy(labels[fit_idx])
    opt = torch.optim.Adam(net.parameters(), lr=_TEACHER_LR)
    loss_fn = nn.CrossEntropyLoss()
    batch = min(_TEACHER_BATCH, len(fit_idx))
    net.train()
    for order in epoch_permutations(len(fit_idx), _TEACHER_EPOCHS, spec.train_seed + 1):
        for start in range(0, len(fit_idx), batch):
            idx = order[start:start + batch]
            opt.zero_grad()
            loss = loss_fn(net(xs[idx]), ys[idx])
            loss.backward()
            opt.step()
    net.eval()

    held = ImageBatch(images.data[held_idx])
    preds = argmax_labels(_forward(net, held.data))
    acc = float((preds == labels[held_idx]).mean())
    return TeacherArtifact(net, spec, acc)


def _forward(net, arrays, chunk=256):
    outs = []
    xs = to_tensor(arrays)
    with torch.no_grad():
        for start in range(0, xs.shape[0], chunk):
            outs.append(net(xs[start:start + chunk]))
    return torch.cat(outs).numpy()


@dataclass
class QueryAudit:
    """Immutable snapshot of the oracle's query log."""

    total_queries: int
    entries: list = field(default_factory=list)  # (batch_size, unix timestamp)


class OracleHandle:
    """Black-box view of a teacher: top-1 labels only, every query counted.

    The underlying model lives in a closure; the handle carries no attribute
    through which weights, gradients or logits can be reached.
    """

    __slots__ = ("_predict", "_format", "_classes", "_count", "_entries", "_lock")

    def __init__(self, predict, input_format: InputFormat, class_count: int):
        self._predict = predict
        self._format = input_format
        self._classes = int(class_count)
        self._count = 0
        self._entries = []
        self._lock = threading.Lock()

    @property
    def input_format(self):
        return self._format

    @property
    def class_count(self):
        return self._classes

    def query_count(self):
        with self._lock:
            return self._count

    def query_top1(self, images):
        """Classify a batch; returns one label per image in [0, class_count).

        Ties in the underlying scores resolve to the lowest class index. The
        audit counter grows by the batch size (atomically).
        """
        if not isinstance(images, ImageBatch):
            images = ImageBatch(images)
        if not images.conforms(self._format):
            raise FormatError(
                f"query batch shape {images.data.shape[1:]} does not match "
                f"oracle format {self._format.shape}"
            )
        images.check_pixels()
        labels = self._predict(images.data)
        labels = [int(v) for v in labels]
        if labels and not all(0 <= v < self._classes for v in labels):
            raise DataError("oracle produced a label outside the class range")
        with self._lock:
            self._count += images.count
            self._entries.append((images.count, time.time()))
        return labels


def seal(teacher: TeacherArtifact) -> OracleHandle:
    """Seal a trained teacher behind the label-only query interface."""
    net = copy.deepcopy(teacher.net)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)

    def predict(arrays):
        return argmax_labels(_forward(net, arrays))

    return OracleHandle(predict, teacher.spec.input_format, teacher.spec.num_classes)


def query_top1(oracle: OracleHandle, images):
    return oracle.query_top1(images)


def audit_of(oracle: OracleHandle) -> QueryAudit:
    """Snapshot the query log (same-module access; the handle stays sealed)."""
    with oracle._lock:
        return QueryAudit(oracle._count, list(oracle._entries))
