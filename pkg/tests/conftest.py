"""Shared fixtures: toy models with known gradients, and a session-scoped
desk fixture (digits corpus -> teacher -> oracle-labeled splits -> one
trained student) reused by the integration and acceptance tests."""

import numpy as np
import pytest
import torch
from torch import nn

from transferbench import corpora, datasets, oracle, student
from transferbench.datasets import ImageBatch, InputFormat, LabeledDataset, SplitConfig

DESK_FMT = InputFormat(16, 16, 1)


class TwoLogitNet(nn.Module):
    """Logits [0, sum(x)]: cross-entropy on label 0 is log(1 + e^sum)."""

    def forward(self, x):
        s = x.flatten(1).sum(dim=1, keepdim=True)
        return torch.cat([torch.zeros_like(s), s], dim=1)


class TinyMLP(nn.Module):
    """16-pixel smooth model (1x4x4 inputs, 3 classes) for gradient checks."""

    def __init__(self, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.fc1 = nn.Linear(16, 8)
        self.fc2 = nn.Linear(8, 3)

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(x.flatten(1))))


class FlatNet(nn.Module):
    """Constant logits with a connected graph: input gradient is exactly zero."""

    def forward(self, x):
        s = x.flatten(1).sum(dim=1, keepdim=True) * 0.0
        return s.expand(-1, 3) + torch.tensor([0.3, 0.1, 0.2])


def toy_student(net, fmt=None, num_classes=2):
    return student.StudentModel(architecture=None, net=net, history=[],
                                num_classes=num_classes,
                                input_format=fmt or DESK_FMT)


def mlp_forward_f64(net: TinyMLP, x):
    """Independent float64 forward pass for the finite-difference oracle."""
    w1 = net.fc1.weight.detach().numpy().astype(np.float64)
    b1 = net.fc1.bias.detach().numpy().astype(np.float64)
    w2 = net.fc2.weight.detach().numpy().astype(np.float64)
    b2 = net.fc2.bias.detach().numpy().astype(np.float64)
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    return np.tanh(flat @ w1.T + b1) @ w2.T + b2


def ce_sum_f64(logits, labels):
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float((lse - logits[np.arange(len(labels)), labels]).sum())


def fd_gradient_f64(net, x, labels, h=1e-3):
    """Central finite differences of the summed cross-entropy, in float64."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat_grad = grad.reshape(-1)
    flat_x = x.astype(np.float64).reshape(-1)
    for i in range(flat_x.size):
        xp, xm = flat_x.copy(), flat_x.copy()
        xp[i] += h
        xm[i] -= h
        lp = ce_sum_f64(mlp_forward_f64(net, xp.reshape(x.shape)), labels)
        lm = ce_sum_f64(mlp_forward_f64(net, xm.reshape(x.shape)), labels)
        flat_grad[i] = (lp - lm) / (2 * h)
    return grad


def random_batch(n, shape=(1, 4, 4), seed=0, lo=0.2, hi=0.8):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=(n, *shape)).astype(np.float32)


def mean_pixel_dataset(n, seed, fmt=DESK_FMT):
    """2-class set labeled by mean pixel > 0.5, with a margin around 0.5."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, *fmt.shape), dtype=np.float32)
    for i in range(n):
        target = rng.uniform(0.3, 0.45) if i % 2 == 0 else rng.uniform(0.55, 0.7)
        img = np.clip(target + rng.uniform(-0.2, 0.2, size=fmt.shape), 0.0, 1.0)
        images[i] = img
    labels = (images.reshape(n, -1).mean(axis=1) > 0.5).astype(np.int64)
    batch = ImageBatch(images)
    return LabeledDataset([f"mem://{i}" for i in range(n)], labels, fmt,
                          "ground-truth", images=batch)


class Desk:
    """Digits corpus, trained teacher, oracle-labeled splits, one student."""

    def __init__(self, root):
        self.fmt = DESK_FMT
        self.corpus = corpora.build_corpus("digits", str(root / "digits"), self.fmt)
        self.teacher_pool, self.attacker_pool = datasets.split(
            self.corpus, SplitConfig(0.5, shuffle_seed=1234))
        self.spec = oracle.TeacherSpec("convnet3", 10, self.fmt, train_seed=1)
        self.teacher = oracle.build_teacher(self.spec, self.teacher_pool)
        sealed = self.seal()
        images, _ = self.attacker_pool.materialize()
        self.labeled = datasets.label_with_oracle(sealed, images, run_id="test")
        self.labeled = LabeledDataset(self.attacker_pool.refs, self.labeled.labels,
                                      self.fmt, self.labeled.provenance, images=images)
        self.train, self.test = datasets.split(self.labeled, SplitConfig(0.8, shuffle_seed=5))
        gt = dict(zip(self.corpus.refs, (int(v) for v in self.corpus.labels)))
        self.test_gt = LabeledDataset(
            self.test.refs, np.array([gt[r] for r in self.test.refs], dtype=np.int64),
            self.fmt, "ground-truth", images=self.test.images)

    def seal(self):
        return oracle.seal(self.teacher)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return Desk(tmp_path_factory.mktemp("desk"))


@pytest.fixture(scope="session")
def desk_student(desk):
    arch = student.find_architecture("deep-s", desk.fmt, 10)
    return student.train_student(arch, desk.train, student.TrainConfig(seed=7),
                                 num_classes=10)
