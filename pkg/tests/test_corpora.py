import numpy as np

from transferbench import corpora
from transferbench.datasets import InputFormat

FMT = InputFormat(16, 16, 1)
RGB = InputFormat(24, 24, 3)


def test_digits_corpus(tmp_path):
    ds = corpora.build_corpus("digits", str(tmp_path / "d"), FMT)
    assert len(ds) == 1797
    assert sorted(set(int(v) for v in ds.labels)) == list(range(10))
    images, _ = ds.materialize()
    assert images.data.shape == (1797, 1, 16, 16)
    assert images.data.min() >= 0.0 and images.data.max() <= 1.0


def test_corpus_manifest_reused(tmp_path):
    root = str(tmp_path / "d")
    first = corpora.build_corpus("digits", root, FMT)
    again = corpora.build_corpus("digits", root, FMT)
    assert first.refs == again.refs
    assert np.array_equal(first.labels, again.labels)


def test_shapes_corpus_deterministic(tmp_path):
    a = corpora.build_corpus("shapes", str(tmp_path / "a"), RGB, seed=3, per_class=4)
    b = corpora.build_corpus("shapes", str(tmp_path / "b"), RGB, seed=3, per_class=4)
    assert len(a) == 40
    ia, la = a.materialize()
    ib, lb = b.materialize()
    assert np.array_equal(ia.data, ib.data)
    assert np.array_equal(la, lb)
    assert ia.data.shape == (40, 3, 24, 24)


def test_shapes_classes_balanced(tmp_path):
    ds = corpora.build_corpus("shapes", str(tmp_path / "s"), RGB, seed=1, per_class=3)
    counts = np.bincount(ds.labels, minlength=10)
    assert counts.tolist() == [3] * 10
