"""Synthetic shape generation and binary batch-format round trips."""

import numpy as np
import pytest

from tfa.datasets import (
    IMAGE_SHAPE,
    RECORD_BYTES,
    FormatError,
    SyntheticShapesSpec,
    encode_cifar10_bytes,
    generate_synthetic,
    load_cifar10_binary,
    parse_cifar10_bytes,
)
from tfa.models import Model, TrainConfig, tiny_cnn, train


class TestSyntheticShapes:
    def test_same_seed_reproduces_every_split(self):
        spec = SyntheticShapesSpec(size=16, train_per_class=5, holdout_per_class=3, test_per_class=4, seed=11)
        a_train, a_hold, a_test = generate_synthetic(spec)
        b_train, b_hold, b_test = generate_synthetic(spec)
        assert np.array_equal(a_train.X, b_train.X)
        assert np.array_equal(a_hold.X, b_hold.X)
        assert np.array_equal(a_test.X, b_test.X)
        assert np.array_equal(a_train.y, b_train.y)

    def test_split_streams_are_independent(self):
        # growing the test split must not move a single training pixel
        small = SyntheticShapesSpec(size=16, train_per_class=6, holdout_per_class=2, test_per_class=2, seed=1)
        big = SyntheticShapesSpec(size=16, train_per_class=6, holdout_per_class=2, test_per_class=9, seed=1)
        a, _, _ = generate_synthetic(small)
        b, _, _ = generate_synthetic(big)
        assert np.array_equal(a.X, b.X)

    def test_exact_label_balance_and_range(self):
        spec = SyntheticShapesSpec(size=14, num_classes=3, train_per_class=7, holdout_per_class=2, test_per_class=3, seed=4)
        for ds, per_class in zip(generate_synthetic(spec), (7, 2, 3)):
            counts = np.bincount(ds.y, minlength=3)
            assert list(counts) == [per_class] * 3
            assert ds.X.shape == (3 * per_class, 1, 14, 14)
            assert ds.X.min() >= 0.0 and ds.X.max() <= 1.0

    def test_classes_differ_by_shape_not_position(self):
        # noiseless images of one class vary across draws (random placement)
        spec = SyntheticShapesSpec(size=16, noise=0.0, train_per_class=6, holdout_per_class=0, test_per_class=1, seed=2)
        train_ds, holdout, _ = generate_synthetic(spec)
        assert holdout is None
        squares = train_ds.X[train_ds.y == 0]
        assert any(not np.array_equal(squares[0], squares[i]) for i in range(1, len(squares)))
        # same ink appears at different positions: per-image mass is constant
        masses = squares.sum(axis=(1, 2, 3))
        np.testing.assert_allclose(masses, masses[0])

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticShapesSpec(size=8)
        with pytest.raises(ValueError):
            SyntheticShapesSpec(num_classes=4)
        with pytest.raises(ValueError):
            SyntheticShapesSpec(noise=-0.1)
        with pytest.raises(ValueError):
            SyntheticShapesSpec(train_per_class=0)

    def test_tiny_cnn_learns_shapes(self):
        # the generator's whole point: separable by a small model at the
        # default 32-pixel scale
        spec = SyntheticShapesSpec(size=32, noise=0.05, train_per_class=200, holdout_per_class=0, test_per_class=40, seed=0)
        train_ds, _, test_ds = generate_synthetic(spec)
        arch = tiny_cnn((1, 32, 32), 3)
        params, _ = train(train_ds, arch, TrainConfig(lr=0.25, epochs=20, batch_size=32, seed=0, lr_decay=0.93))
        assert Model(arch).accuracy(params, test_ds) >= 0.95


def fake_records(n, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = rng.integers(0, 10, size=n)
    body = rng.integers(0, 256, size=(n, RECORD_BYTES - 1), dtype=np.uint8)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], body], axis=1)
    return records.tobytes(), np.asarray(labels, dtype=np.int64)


class TestBinaryFormat:
    def test_parse_shapes_scaling_and_labels(self):
        raw, labels = fake_records(7, seed=1)
        X, y = parse_cifar10_bytes(raw)
        assert X.shape == (7, *IMAGE_SHAPE)
        assert np.array_equal(y, labels)
        assert X.min() >= 0.0 and X.max() <= 1.0
        # byte 0 and byte 255 map to the interval ends exactly
        first_byte = raw[1]
        assert X[0].ravel()[0] == first_byte / 255.0

    def test_round_trip_is_byte_identical(self):
        for seed in range(3):
            raw, _ = fake_records(5, seed=seed)
            X, y = parse_cifar10_bytes(raw)
            assert encode_cifar10_bytes(X, y) == raw

    def test_bad_length_rejected(self):
        raw, _ = fake_records(2)
        with pytest.raises(FormatError):
            parse_cifar10_bytes(raw[:-1])
        with pytest.raises(FormatError):
            parse_cifar10_bytes(b"")

    def test_invalid_label_byte_rejected(self):
        raw, _ = fake_records(3, labels=[0, 255, 3])
        with pytest.raises(FormatError, match="label"):
            parse_cifar10_bytes(raw)

    def test_encode_validation(self):
        with pytest.raises(FormatError):
            encode_cifar10_bytes(np.zeros((2, 1, 32, 32)), np.zeros(2, dtype=int))
        with pytest.raises(FormatError):
            encode_cifar10_bytes(np.zeros((2, *IMAGE_SHAPE)), np.array([0, 12]))
        with pytest.raises(FormatError):
            encode_cifar10_bytes(np.zeros((2, *IMAGE_SHAPE)), np.array([0]))


class TestDirectoryLoader:
    def write_layout(self, tmp_path, per_file=10):
        labels = [i % 10 for i in range(per_file)]
        for i in range(1, 6):
            raw, _ = fake_records(per_file, seed=i, labels=labels)
            (tmp_path / f"data_batch_{i}.bin").write_bytes(raw)
        raw, _ = fake_records(per_file, seed=99, labels=labels)
        (tmp_path / "test_batch.bin").write_bytes(raw)

    def test_loads_all_batches(self, tmp_path):
        self.write_layout(tmp_path)
        train_ds, test_ds = load_cifar10_binary(tmp_path)
        assert len(train_ds) == 50
        assert len(test_ds) == 10
        assert train_ds.X.shape[1:] == IMAGE_SHAPE

    def test_class_subset_remaps_labels(self, tmp_path):
        self.write_layout(tmp_path)
        train_ds, test_ds = load_cifar10_binary(tmp_path, classes=(3, 7))
        assert set(train_ds.y) == {0, 1}
        assert len(train_ds) == 10  # 5 files x 1 of each kept label
        assert set(test_ds.y) == {0, 1}

    def test_per_class_cap_keeps_first_in_file_order(self, tmp_path):
        labels = [3, 5, 3, 5, 3, 5]
        raws = []
        for i in range(1, 6):
            raw, _ = fake_records(6, seed=10 + i, labels=labels)
            raws.append(raw)
            (tmp_path / f"data_batch_{i}.bin").write_bytes(raw)
        (tmp_path / "test_batch.bin").write_bytes(raws[0])
        train_ds, _ = load_cifar10_binary(tmp_path, classes=(3, 5), per_class_cap=3)
        assert list(train_ds.y) == [0, 1, 0, 1, 0, 1]
        # cap fills entirely from the first batch file
        X1, _ = parse_cifar10_bytes(raws[0])
        assert np.array_equal(train_ds.X, X1)

    def test_missing_file_is_a_format_error(self, tmp_path):
        self.write_layout(tmp_path)
        (tmp_path / "data_batch_4.bin").unlink()
        with pytest.raises(FormatError, match="data_batch_4"):
            load_cifar10_binary(tmp_path)
