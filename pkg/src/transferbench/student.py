"""Substitute (student) models: capacity catalog, supervised training, gradients.

The catalog spans four capacity tiers, largest to smallest: ``deep``
(stacked double-conv blocks with a wide linear head), ``residual`` and
``dense`` (medium, skip/concat style), and ``compact`` (small plain conv
nets). Parameter counts are strictly tier-ordered and checked when the
catalog is built.

Training follows a plain supervised recipe: SGD, cross-entropy,
lr 0.001, 30 epochs by default. Attacks consume students through
:func:`loss_and_input_gradient`, which differentiates the loss with
respect to the input pixels.
"""

from __future__ import annotations

import os
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._torch import argmax_labels, batch_logits, epoch_permutations, to_tensor
from .datasets import ImageBatch, InputFormat, LabeledDataset
from .errors import ConfigurationError, DataError, NumericError, TrainingError

TIER_ORDER = ("deep", "residual", "dense", "compact")  # largest -> smallest

DESK_FORMAT = InputFormat(16, 16, 1)
DESK_CLASSES = 10


class _Residual(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(ch)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + x)


class _ResidualNet(nn.Module):
    def __init__(self, width, fmt, num_classes):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(fmt.channels, width, 3, padding=1),
                                  nn.BatchNorm2d(width), nn.ReLU(), nn.MaxPool2d(2))
        self.block1 = _Residual(width)
        self.pool = nn.MaxPool2d(2)
        self.block2 = _Residual(width)
        self.head = nn.Linear(width * (fmt.height // 4) * (fmt.width // 4), num_classes)

    def forward(self, x):
        x = self.stem(x)
        x = self.pool(self.block1(x))
        x = self.block2(x)
        return self.head(x.flatten(1))


class _DenseNet(nn.Module):
    def __init__(self, stem, growth, layers, fmt, num_classes):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(fmt.channels, stem, 3, padding=1),
                                  nn.BatchNorm2d(stem), nn.ReLU(), nn.MaxPool2d(2))
        convs, bns = [], []
        ch = stem
        for _ in range(layers):
            convs.append(nn.Conv2d(ch, growth, 3, padding=1))
            bns.append(nn.BatchNorm2d(growth))
            ch += growth
        self.convs = nn.ModuleList(convs)
        self.bns = nn.ModuleList(bns)
        self.pool = nn.MaxPool2d(2)
        self.head = nn.Linear(ch * (fmt.height // 4) * (fmt.width // 4), num_classes)

    def forward(self, x):
        x = self.stem(x)
        for conv, bn in zip(self.convs, self.bns):
            x = torch.cat([x, F.relu(bn(conv(x)))], dim=1)
        x = self.pool(x)
        return self.head(x.flatten(1))


class _DeepNet(nn.Module):
    """Double-conv blocks plus a wide linear head (the heavyweight tier)."""

    def __init__(self, w1, w2, hidden, fmt, num_classes):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(fmt.channels, w1, 3, padding=1), nn.BatchNorm2d(w1), nn.ReLU(),
            nn.Conv2d(w1, w1, 3, padding=1), nn.BatchNorm2d(w1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(w1, w2, 3, padding=1), nn.BatchNorm2d(w2), nn.ReLU(),
            nn.Conv2d(w2, w2, 3, padding=1), nn.BatchNorm2d(w2), nn.ReLU(),
            nn.MaxPool2d(2),
        )
        flat = w2 * (fmt.height // 4) * (fmt.width // 4)
        self.head = nn.Sequential(nn.Linear(flat, hidden), nn.ReLU(),
                                  nn.Linear(hidden, num_classes))

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class _CompactNet(nn.Module):
    def __init__(self, w1, w2, fmt, num_classes):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(fmt.channels, w1, 3, padding=1), nn.BatchNorm2d(w1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(w1, w2, 3, padding=1), nn.BatchNorm2d(w2), nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.head = nn.Linear(w2 * (fmt.height // 4) * (fmt.width // 4), num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


_VARIANTS = {
    # variant id -> (family, builder)
    "deep-s": ("deep", lambda fmt, k: _DeepNet(32, 64, 256, fmt, k)),
    "deep-l": ("deep", lambda fmt, k: _DeepNet(48, 96, 256, fmt, k)),
    "residual-s": ("residual", lambda fmt, k: _ResidualNet(32, fmt, k)),
    "residual-l": ("residual", lambda fmt, k: _ResidualNet(40, fmt, k)),
    "dense-s": ("dense", lambda fmt, k: _DenseNet(24, 20, 4, fmt, k)),
    "dense-l": ("dense", lambda fmt, k: _DenseNet(24, 24, 4, fmt, k)),
    "compact-s": ("compact", lambda fmt, k: _CompactNet(8, 16, fmt, k)),
    "compact-l": ("compact", lambda fmt, k: _CompactNet(12, 24, fmt, k)),
}


@dataclass(frozen=True)
class StudentArchitecture:
    family: str
    variant: str
    parameter_count: int

    def build(self, fmt: InputFormat, num_classes: int) -> nn.Module:
        return _VARIANTS[self.variant][1](fmt, num_classes)


def _param_count(net):
    return sum(p.numel() for p in net.parameters())


def catalog(input_format: InputFormat = DESK_FORMAT, num_classes: int = DESK_CLASSES):
    """All student variants with parameter counts, tier-ordered and checked.

    Checks at build time: every deep variant has at least 3x the parameters
    of any residual/dense variant, which in turn have at least 5x the
    parameters of any compact variant; the largest/smallest ratio across the
    catalog is at least 15x.
    """
    archs = []
    for variant, (family, build) in _VARIANTS.items():
        archs.append(StudentArchitecture(family, variant, _param_count(build(input_format, num_classes))))
    by_tier = {t: [a.parameter_count for a in archs if a.family == t] for t in TIER_ORDER}
    mid = by_tier["residual"] + by_tier["dense"]
    assert min(by_tier["deep"]) >= 3 * max(mid), "deep tier must dominate mid tiers"
    assert min(mid) >= 5 * max(by_tier["compact"]), "mid tiers must dominate compact tier"
    assert max(by_tier["deep"]) >= 15 * min(by_tier["compact"]), "catalog span too narrow"
    archs.sort(key=lambda a: (TIER_ORDER.index(a.family), -a.parameter_count))
    return archs


def find_architecture(variant, input_format=DESK_FORMAT, num_classes=DESK_CLASSES):
    for arch in catalog(input_format, num_classes):
        if arch.variant == variant:
            return arch
    raise ConfigurationError(f"unknown student variant {variant!r}; catalog: {sorted(_VARIANTS)}")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    loss: str = "cross-entropy"
    learning_rate: float = 0.001
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.optimizer != "sgd":
            raise ConfigurationError("only plain sgd is supported")
        if self.loss != "cross-entropy":
            raise ConfigurationError("only cross-entropy training loss is supported")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


EpochStats = namedtuple("EpochStats", "epoch mean_loss train_accuracy")


@dataclass
class StudentModel:
    architecture: StudentArchitecture
    net: nn.Module
    history: list = field(default_factory=list)
    num_classes: int = DESK_CLASSES
    input_format: InputFormat = DESK_FORMAT
    training_provenance: str = ""
    seed: int = 0

    def logits(self, images):
        data = images.data if isinstance(images, ImageBatch) else images
        return batch_logits(self.net, data)

    def predict(self, images):
        return argmax_labels(self.logits(images))

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        torch.save(
            {
                "variant": self.architecture.variant,
                "state": self.net.state_dict(),
                "history": [tuple(h) for h in self.history],
                "num_classes": self.num_classes,
                "input_format": self.input_format.to_dict(),
                "training_provenance": self.training_provenance,
                "seed": self.seed,
            },
            path,
        )

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise DataError(f"no student model at {path}")
        blob = torch.load(path, weights_only=False)
        fmt = InputFormat.from_dict(blob["input_format"])
        arch = find_architecture(blob["variant"], fmt, blob["num_classes"])
        net = arch.build(fmt, blob["num_classes"])
        net.load_state_dict(blob["state"])
        net.eval()
        return cls(
            architecture=arch,
            net=net,
            history=[EpochStats(*h) for h in blob["history"]],
            num_classes=blob["num_classes"],
            input_format=fmt,
            training_provenance=blob["training_provenance"],
            seed=blob["seed"],
        )


def random_student(arch: StudentArchitecture, input_format: InputFormat,
                   num_classes: int, seed: int = 0) -> StudentModel:
    """A randomly initialized, never-trained student (blind-attack baseline)."""
    torch.manual_seed(seed)
    net = arch.build(input_format, num_classes)
    net.eval()
    return StudentModel(arch, net, [], num_classes, input_format,
                        training_provenance="untrained", seed=seed)


def train_student(arch: StudentArchitecture, train_set: LabeledDataset,
                  config: TrainConfig, num_classes=None) -> StudentModel:
    """Supervised training on the (oracle-)labeled teaching set.

    Deterministic per config.seed. History records one (epoch, mean_loss,
    train_accuracy) entry per epoch; training must make progress (final
    epoch loss below first epoch loss) or a TrainingError is raised.
    """
    if len(train_set) == 0:
        raise ConfigurationError("cannot train a student on an empty dataset")
    if config.batch_size > len(train_set):
        raise ConfigurationError(
            f"batch_size {config.batch_size} exceeds dataset size {len(train_set)}"
        )
    images, labels = train_set.materialize()
    k = int(num_classes if num_classes is not None else labels.max() + 1)
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"labels outside [0, {k})")

    torch.manual_seed(config.seed)
    net = arch.build(train_set.format, k)
    xs = to_tensor(images)
    ys = torch.from_numpy(labels)
    opt = torch.optim.SGD(net.parameters(), lr=config.learning_rate)
    n = len(train_set)

    history = []
    net.train()
    for epoch, order in enumerate(epoch_permutations(n, config.epochs, config.seed + 1), start=1):
        total_loss, total_hits = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            logits = net(xs[idx])
            loss = F.cross_entropy(logits, ys[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"training loss became non-finite at epoch {epoch}", epoch=epoch)
            loss.backward()
            opt.step()
            total_loss += float(loss.detach()) * len(idx)
            total_hits += int((logits.detach().argmax(1) == ys[idx]).sum())
        history.append(EpochStats(epoch, total_loss / n, total_hits / n))
    net.eval()

    if config.epochs > 1 and not history[-1].mean_loss < history[0].mean_loss:
        raise TrainingError(
            f"no training progress: epoch {config.epochs} loss {history[-1].mean_loss:.6f} "
            f">= epoch 1 loss {history[0].mean_loss:.6f}",
            epoch=config.epochs,
        )
    return StudentModel(arch, net, history, k, train_set.format,
                        training_provenance=train_set.provenance, seed=config.seed)


def accuracy(model: StudentModel, labeled: LabeledDataset) -> float:
    """Fraction of items whose predicted class matches the stored label."""
    if len(labeled) == 0:
        raise DataError("cannot score an empty dataset")
    images, labels = labeled.materialize()
    preds = model.predict(images)
    return float((preds == labels).mean())


def loss_and_input_gradient(model: StudentModel, x, y=None,
                            loss_kind="cross-entropy", ref_logits=None):
    """Loss and its exact gradient with respect to the input pixels.

    loss_kind "cross-entropy" scores against integer labels y; loss_kind
    "kl-to-reference" measures KL(softmax(ref_logits) || softmax(model(x)))
    and ignores y. Both reduce by sum, so per-image gradients are
    independent of batch composition. Returns (loss, grad) with grad shaped
    like x.
    """
    batch = x if isinstance(x, ImageBatch) else ImageBatch(x)
    batch.check_pixels()
    model.net.eval()
    xt = to_tensor(batch).clone().requires_grad_(True)
    logits = model.net(xt)
    if loss_kind == "cross-entropy":
        if y is None:
            raise ConfigurationError("cross-entropy gradient needs labels")
        yt = torch.as_tensor(np.asarray(y, dtype=np.int64))
        if yt.numel() and (int(yt.min()) < 0 or int(yt.max()) >= logits.shape[1]):
            raise DataError("labels outside the model's class range")
        loss = F.cross_entropy(logits, yt, reduction="sum")
    elif loss_kind == "kl-to-reference":
        if ref_logits is None:
            raise ConfigurationError("kl-to-reference gradient needs ref_logits")
        ref = torch.as_tensor(np.asarray(ref_logits, dtype=np.float32))
        loss = F.kl_div(F.log_softmax(logits, dim=1), F.softmax(ref, dim=1), reduction="sum")
    else:
        raise ConfigurationError(f"unknown loss kind {loss_kind!r}")
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss while computing input gradient")
    (grad_t,) = torch.autograd.grad(loss, xt)
    grad = grad_t.numpy().astype(np.float32, copy=False)
    if not np.isfinite(grad).all():
        raise NumericError("non-finite input gradient")
    return float(loss.detach()), grad


def save_history_csv(model: StudentModel, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,mean_loss,train_accuracy\n")
        for h in model.history:
            fh.write(f"{h.epoch},{h.mean_loss:.6f},{h.train_accuracy:.6f}\n")
