"""Dataset generation, splits, persistence, and IDX ingestion."""

import struct

import numpy as np
import pytest

from unpoison.data import (Dataset, generate_shapes_dataset, load_dataset,
                           load_idx_dataset, save_dataset, split)
from unpoison.errors import ConfigurationError, InputError


class TestGeneration:
    def test_counts_and_balance(self):
        ds = generate_shapes_dataset(3, 50, side=16, noise=0.05, seed=7)
        assert len(ds) == 150
        assert np.all(np.bincount(ds.labels) == 50)

    def test_determinism(self):
        a = generate_shapes_dataset(3, 20, side=16, noise=0.05, seed=7)
        b = generate_shapes_dataset(3, 20, side=16, noise=0.05, seed=7)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seeds_differ(self):
        a = generate_shapes_dataset(2, 10, side=16, seed=1)
        b = generate_shapes_dataset(2, 10, side=16, seed=2)
        assert not np.array_equal(a.images, b.images)

    def test_pixel_range(self):
        ds = generate_shapes_dataset(4, 10, side=20, noise=0.3, seed=3)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_color_rendering(self):
        ds = generate_shapes_dataset(3, 5, side=16, seed=3, channels=3)
        assert ds.images.shape[1] == 3

    @pytest.mark.parametrize("kwargs", [
        {"class_count": 1, "per_class": 10},
        {"class_count": 3, "per_class": 0},
        {"class_count": 3, "per_class": 10, "side": 8},
        {"class_count": 99, "per_class": 10},
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            generate_shapes_dataset(**{"side": 16, "seed": 0, **kwargs})


class TestDataset:
    def test_ids_unique_enforced(self):
        imgs = np.zeros((2, 1, 4, 4))
        with pytest.raises(InputError):
            Dataset(imgs, np.array([0, 1]), np.array([3, 3]), 2)

    def test_label_bound_enforced(self):
        imgs = np.zeros((2, 1, 4, 4))
        with pytest.raises(InputError):
            Dataset(imgs, np.array([0, 5]), np.array([0, 1]), 2)

    def test_subset_and_drop(self, small_shapes):
        keep = small_shapes.ids[:10]
        sub = small_shapes.subset_by_ids(keep)
        assert set(sub.ids) == set(keep)
        dropped = small_shapes.drop_ids(keep)
        assert set(dropped.ids) == set(small_shapes.ids) - set(keep)


class TestSplit:
    def test_identity_fraction(self, small_shapes):
        (only,) = split(small_shapes, [1.0], seed=0)
        assert set(only.ids) == set(small_shapes.ids)

    def test_floor_then_distribute_sizes(self):
        ds = generate_shapes_dataset(3, 1000, side=16, seed=0)
        a, b = split(ds, [0.8, 0.2], seed=4)
        assert (len(a), len(b)) == (2400, 600)

    def test_partition_property(self, small_shapes):
        parts = split(small_shapes, [0.5, 0.3, 0.2], seed=9)
        union = set()
        for part in parts:
            ids = set(part.ids)
            assert not (union & ids)
            union |= ids
        assert union == set(small_shapes.ids)

    def test_bad_fractions(self, small_shapes):
        with pytest.raises(ConfigurationError):
            split(small_shapes, [0.6, 0.6], seed=0)
        with pytest.raises(ConfigurationError):
            split(small_shapes, [0.5, -0.5, 1.0], seed=0)


class TestPersistence:
    def test_round_trip_bit_exact(self, small_shapes, tmp_path):
        save_dataset(small_shapes, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert np.array_equal(loaded.images, small_shapes.images)
        assert np.array_equal(loaded.labels, small_shapes.labels)
        assert np.array_equal(loaded.ids, small_shapes.ids)
        assert loaded.class_count == small_shapes.class_count
        assert loaded.digest() == small_shapes.digest()


class TestIdx:
    def _write_idx(self, tmp_path, images, labels):
        n, h, w = images.shape
        img_path = tmp_path / "imgs.idx"
        lab_path = tmp_path / "labs.idx"
        img_path.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + images.tobytes())
        lab_path.write_bytes(struct.pack(">II", 0x801, n) + labels.tobytes())
        return img_path, lab_path

    def test_load(self, tmp_path):
        g = np.random.default_rng(0)
        images = g.integers(0, 256, size=(5, 9, 9), dtype=np.uint8)
        labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
        img_path, lab_path = self._write_idx(tmp_path, images, labels)
        ds = load_idx_dataset(img_path, lab_path)
        assert ds.images.shape == (5, 1, 9, 9)
        assert ds.class_count == 3
        assert np.allclose(ds.images[0, 0] * 255, images[0], atol=0.5)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(struct.pack(">IIII", 0xdead, 1, 2, 2) + b"\x00" * 4)
        with pytest.raises(InputError):
            load_idx_dataset(path, path)
