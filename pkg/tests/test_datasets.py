import os
from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image

from transferbench.datasets import (
    ImageBatch,
    InputFormat,
    LabeledDataset,
    RawDataset,
    SplitConfig,
    class_histogram,
    label_with_oracle,
    preprocess,
    read_labeled_manifest,
    read_raw_manifest,
    round_half_up,
    split,
    subsample,
    write_labeled_manifest,
    write_raw_manifest,
)
from transferbench.errors import ConfigurationError, DataError, FormatError

FMT = InputFormat(16, 16, 1)


def fake_dataset(n, fmt=FMT, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset([f"mem://{i}" for i in range(n)],
                          rng.integers(0, 10, size=n), fmt, "ground-truth")


class TestInputFormat:
    def test_too_small(self):
        with pytest.raises(ConfigurationError):
            InputFormat(4, 16, 1)

    def test_bad_channels(self):
        with pytest.raises(ConfigurationError):
            InputFormat(16, 16, 2)

    def test_shape(self):
        assert InputFormat(32, 24, 3).shape == (3, 32, 24)


class TestImageBatch:
    def test_rank4_required(self):
        with pytest.raises(FormatError):
            ImageBatch(np.zeros((3, 16, 16), dtype=np.float32))

    def test_pixel_check(self):
        batch = ImageBatch(np.full((1, 1, 16, 16), 1.5, dtype=np.float32))
        with pytest.raises(DataError):
            batch.check_pixels()


class TestSplit:
    def test_paper_ratio_4to1(self):
        # 13.6K images split 4:1 -> 10880 / 2720
        train, test = split(fake_dataset(13600), SplitConfig(0.8, 0))
        assert (len(train), len(test)) == (10880, 2720)

    def test_small_arithmetic(self):
        train, test = split(fake_dataset(100), SplitConfig(0.8, 0))
        assert (len(train), len(test)) == (80, 20)

    def test_seed_determinism(self):
        ds = fake_dataset(101)
        a1, b1 = split(ds, SplitConfig(0.8, 42))
        a2, b2 = split(ds, SplitConfig(0.8, 42))
        assert a1.refs == a2.refs and b1.refs == b2.refs

    def test_partition_invariant_random(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(5, 400))
            seed = int(rng.integers(0, 2**31))
            ds = fake_dataset(n, seed=seed)
            train, test = split(ds, SplitConfig(0.8, seed))
            assert len(train) + len(test) == n
            assert set(train.refs).isdisjoint(test.refs)
            assert set(train.refs) | set(test.refs) == set(ds.refs)

    def test_too_small(self):
        with pytest.raises(ConfigurationError):
            split(fake_dataset(4), SplitConfig(0.8, 0))

    def test_bad_ratio(self):
        with pytest.raises(ConfigurationError):
            SplitConfig(1.0, 0)


class TestSubsample:
    def test_paper_ten_percent(self):
        # 10% of a 3670-image training set -> 367 items
        assert len(subsample(fake_dataset(3670), 0.10, seed=0)) == 367

    def test_identity(self):
        ds = fake_dataset(50)
        sub = subsample(ds, 1.0, seed=3)
        assert sub.refs == ds.refs and np.array_equal(sub.labels, ds.labels)

    def test_subset_without_replacement(self):
        ds = fake_dataset(200)
        sub = subsample(ds, 0.1, seed=9)
        assert len(sub) == 20
        assert len(set(sub.refs)) == len(sub.refs)
        assert set(sub.refs) <= set(ds.refs)

    def test_determinism(self):
        ds = fake_dataset(99)
        assert subsample(ds, 0.37, seed=5).refs == subsample(ds, 0.37, seed=5).refs

    def test_empty_result(self):
        with pytest.raises(ConfigurationError):
            subsample(fake_dataset(10), 0.01, seed=0)

    def test_bad_fraction(self):
        with pytest.raises(ConfigurationError):
            subsample(fake_dataset(10), 1.5, seed=0)


def _save_png(path, arr, mode):
    Image.fromarray(arr, mode=mode).save(path)


class TestPreprocess:
    def test_resize_contract(self, tmp_path):
        p = tmp_path / "img.png"
        rng = np.random.default_rng(0)
        _save_png(p, rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8), "RGB")
        batch, skipped = preprocess(RawDataset([str(p)]), InputFormat(128, 128, 3))
        assert batch.data.shape == (1, 3, 128, 128)
        assert skipped == []
        assert 0.0 <= batch.data.min() and batch.data.max() <= 1.0

    def test_identity_case(self, tmp_path):
        p = tmp_path / "img.png"
        rng = np.random.default_rng(1)
        arr = rng.integers(0, 256, size=(16, 16), dtype=np.uint8)
        _save_png(p, arr, "L")
        batch, _ = preprocess(RawDataset([str(p)]), FMT)
        assert np.array_equal(batch.data[0, 0], arr.astype(np.float32) / 255.0)

    def test_constant_preserved_by_resampling(self, tmp_path):
        p = tmp_path / "gray.png"
        _save_png(p, np.full((32, 32), 128, dtype=np.uint8), "L")
        batch, _ = preprocess(RawDataset([str(p)]), FMT)
        assert np.all(batch.data == np.float32(128 / 255.0))

    def test_skip_undecodable(self, tmp_path):
        good = tmp_path / "ok.png"
        _save_png(good, np.zeros((16, 16), dtype=np.uint8), "L")
        bad = tmp_path / "bad.png"
        bad.write_text("not an image")
        batch, skipped = preprocess(RawDataset([str(bad), str(good)]), FMT)
        assert skipped == [str(bad)]
        assert batch.paths == [str(good)]

    def test_all_undecodable(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_text("nope")
        with pytest.raises(DataError):
            preprocess(RawDataset([str(bad)]), FMT)

    def test_empty_raw(self):
        with pytest.raises(DataError):
            preprocess(RawDataset([]), FMT)

    def test_pixel_range_over_random_corpus(self, tmp_path):
        rng = np.random.default_rng(2)
        paths = []
        for i, size in enumerate((8, 16, 33, 64) * 5):
            p = tmp_path / f"r{i}.png"
            _save_png(p, rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8), "RGB")
            paths.append(str(p))
        batch, _ = preprocess(RawDataset(paths), InputFormat(16, 16, 3))
        assert batch.data.min() >= 0.0 and batch.data.max() <= 1.0
        assert batch.count == len(paths)


class TestLabelWithOracle:
    def _fake_oracle(self, fmt=FMT):
        calls = {"n": 0}

        def query(batch):
            calls["n"] += batch.count
            return [0] * batch.count

        return SimpleNamespace(input_format=fmt, query_top1=query, calls=calls)

    def test_constant_oracle(self):
        fake = self._fake_oracle()
        images = ImageBatch(np.zeros((10, 1, 16, 16), dtype=np.float32))
        ds = label_with_oracle(fake, images, run_id="r1")
        assert len(ds) == 10
        assert np.all(ds.labels == 0)
        assert fake.calls["n"] == 10
        assert ds.provenance == "oracle:r1"

    def test_format_mismatch(self):
        fake = self._fake_oracle()
        images = ImageBatch(np.zeros((2, 3, 16, 16), dtype=np.float32))
        with pytest.raises(FormatError):
            label_with_oracle(fake, images)


class TestManifests:
    def test_labeled_roundtrip_relative_paths(self, tmp_path):
        img_dir = tmp_path / "imgs"
        img_dir.mkdir()
        refs = []
        for i in range(3):
            p = img_dir / f"i{i}.png"
            _save_png(p, np.full((16, 16), i * 40, dtype=np.uint8), "L")
            refs.append(str(p))
        ds = LabeledDataset(refs, np.array([0, 1, 2]), FMT, "ground-truth")
        manifest = tmp_path / "set.csv"
        write_labeled_manifest(ds, manifest)
        text = manifest.read_text()
        assert text.splitlines()[0] == "path,label"
        assert "imgs/i0.png" in text and str(tmp_path) not in text
        back = read_labeled_manifest(manifest, FMT)
        assert [os.path.abspath(r) for r in back.refs] == refs
        assert np.array_equal(back.labels, ds.labels)
        images, labels = back.materialize()
        assert images.count == 3

    def test_raw_roundtrip(self, tmp_path):
        manifest = tmp_path / "raw.csv"
        write_raw_manifest(RawDataset([str(tmp_path / "a.png")]), manifest)
        raw = read_raw_manifest(manifest)
        assert raw.paths == [str(tmp_path / "a.png")]

    def test_bad_header(self, tmp_path):
        manifest = tmp_path / "bad.csv"
        manifest.write_text("file,cls\nx.png,0\n")
        with pytest.raises(DataError):
            read_labeled_manifest(manifest, FMT)


def test_class_histogram():
    ds = LabeledDataset(["a", "b", "c"], np.array([0, 2, 2]), FMT)
    assert class_histogram(ds, 4).tolist() == [1, 0, 2, 0]


def test_round_half_up():
    assert round_half_up(2.5) == 3
    assert round_half_up(2.49) == 2
    assert round_half_up(0.8 * 13600) == 10880
    assert round_half_up(0.1 * 3670) == 367
