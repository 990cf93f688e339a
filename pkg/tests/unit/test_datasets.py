"""
Unit tests for dataset generation, IDX ingestion and image output
"""

import gzip
import struct

import numpy as np
import pandas as pd
import pytest

from datasets import (
    Dataset,
    DatasetFormatError,
    DatasetKind,
    DatasetSpec,
    EmptyDatasetError,
    Normalization,
    image_grid,
    iterate_batches,
    load_dataset,
    load_idx_images,
    load_vectors_csv,
    parse_idx,
    read_idx,
    read_pgm,
    write_idx,
    write_pgm,
    write_vectors_csv,
)
from models import Likelihood


def idx_bytes(n=2, rows=28, cols=28, fill=7):
    header = struct.pack(">BBBB", 0, 0, 0x08, 3) + struct.pack(">III", n, rows, cols)
    return header + bytes([fill]) * (n * rows * cols)


class TestIDX:
    """Big-endian IDX files"""

    def test_parse_image_file(self):
        array = parse_idx(idx_bytes())
        assert array.shape == (2, 28, 28)
        assert array.dtype == np.dtype(">u1")
        assert int(array[1, 27, 27]) == 7

    def test_magic_number_check(self):
        raw = bytearray(idx_bytes())
        raw[0] = 1
        with pytest.raises(DatasetFormatError) as info:
            parse_idx(bytes(raw))
        assert info.value.offset == 0

    def test_unknown_type_code(self):
        raw = bytearray(idx_bytes())
        raw[2] = 0x07
        with pytest.raises(DatasetFormatError) as info:
            parse_idx(bytes(raw))
        assert info.value.offset == 2

    def test_truncated_dimensions(self):
        with pytest.raises(DatasetFormatError) as info:
            parse_idx(idx_bytes()[:10])
        assert info.value.offset == 8

    def test_payload_size_mismatch(self):
        with pytest.raises(DatasetFormatError) as info:
            parse_idx(idx_bytes()[:-1])
        assert info.value.offset == 16

    def test_wider_types(self):
        values = np.array([1.5, -2.25], dtype=">f4")
        raw = struct.pack(">BBBB", 0, 0, 0x0D, 1) + struct.pack(">I", 2) + values.tobytes()
        np.testing.assert_array_equal(parse_idx(raw), [1.5, -2.25])

    def test_gzip_and_scaling(self, tmp_path):
        path = tmp_path / "images-idx3-ubyte.gz"
        with gzip.open(path, "wb") as f:
            f.write(idx_bytes(n=3, rows=4, cols=5, fill=255))
        assert read_idx(path).shape == (3, 4, 5)
        dataset = load_idx_images(path, max_items=2)
        assert dataset.data.shape == (2, 20)
        assert dataset.image_shape == (4, 5)
        np.testing.assert_array_equal(dataset.data, 1.0)

    def test_write_then_read(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(4, 3, 3)).astype(np.uint8)
        path = write_idx(tmp_path / "small-idx3-ubyte", images)
        np.testing.assert_array_equal(read_idx(path), images)


class TestSyntheticData:
    """Deterministic generators"""

    @pytest.mark.parametrize("kind", ["gaussian-mixture", "pinwheel", "two-moons", "linear-gaussian"])
    def test_deterministic_in_seed(self, kind):
        a = load_dataset(DatasetSpec(kind=kind, n_samples=50, seed=4)).data
        b = load_dataset(DatasetSpec(kind=kind, n_samples=50, seed=4)).data
        c = load_dataset(DatasetSpec(kind=kind, n_samples=50, seed=5)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert len(a) == 50

    def test_mixture_sits_on_the_circle(self):
        data = load_dataset(DatasetSpec(n_samples=2000, radius=3.0, noise=0.01)).data
        np.testing.assert_allclose(np.linalg.norm(data, axis=1), 3.0, atol=0.06)

    def test_linear_gaussian_records_truth(self):
        dataset = load_dataset(DatasetSpec(kind=DatasetKind.LINEAR_GAUSSIAN, n_samples=20000,
                                           latent_dim=2, obs_dim=5, obs_noise=0.3))
        weight, bias = dataset.truth["weight"], dataset.truth["bias"]
        assert weight.shape == (5, 2)
        np.testing.assert_allclose(dataset.data.mean(axis=0), bias, atol=0.15)
        np.testing.assert_allclose(np.cov(dataset.data.T), weight @ weight.T + 0.09 * np.eye(5), atol=0.3)

    def test_normalization(self):
        standard = load_dataset(DatasetSpec(n_samples=500, normalization=Normalization.STANDARDIZE)).data
        np.testing.assert_allclose(standard.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(standard.std(axis=0), 1.0)
        unit = load_dataset(DatasetSpec(n_samples=500, normalization="unit-interval")).data
        assert unit.min() == 0.0 and unit.max() == 1.0

    def test_discretized_likelihood_quantizes(self):
        spec = DatasetSpec(n_samples=100, normalization=Normalization.UNIT_INTERVAL)
        data = load_dataset(spec, likelihood=Likelihood.DISCRETIZED_GAUSSIAN).data
        np.testing.assert_allclose(data * 255, np.round(data * 255), atol=1e-9)

    def test_empty_dataset(self):
        with pytest.raises(EmptyDatasetError):
            load_dataset(DatasetSpec(n_samples=0))

    def test_spec_validation_and_round_trip(self):
        with pytest.raises(ValueError):
            DatasetSpec(kind=DatasetKind.IDX_IMAGES)
        with pytest.raises(ValueError):
            DatasetSpec(radius=0.0)
        spec = DatasetSpec(kind="pinwheel", n_components=5, normalization="standardize")
        assert DatasetSpec.from_dict(spec.to_dict()) == spec


class TestBatching:
    """Epoch shuffles"""

    def test_every_row_once_per_epoch(self):
        data = np.arange(10, dtype=float)[:, None]
        batches = list(iterate_batches(data, 4, seed=1, epoch=0))
        assert [len(b) for b in batches] == [4, 4, 2]
        np.testing.assert_array_equal(np.sort(np.concatenate(batches)[:, 0]), np.arange(10))

    def test_order_depends_on_seed_and_epoch(self):
        data = np.arange(50, dtype=float)[:, None]
        first = np.concatenate(list(iterate_batches(data, 8, seed=1, epoch=0)))
        again = np.concatenate(list(iterate_batches(data, 8, seed=1, epoch=0)))
        other = np.concatenate(list(iterate_batches(data, 8, seed=1, epoch=1)))
        np.testing.assert_array_equal(first, again)
        assert not np.array_equal(first, other)

    def test_dataset_batches(self):
        dataset = Dataset(data=np.zeros((9, 2)))
        assert dataset.num_batches(4) == 3
        assert sum(len(b) for b in dataset.batches(4, seed=0, epoch=2)) == 9


class TestFiles:
    """CSV vectors and PGM images"""

    def test_vectors_csv(self, tmp_path, rng):
        samples = rng.standard_normal((6, 3))
        path = write_vectors_csv(tmp_path / "samples.csv", samples)
        assert list(pd.read_csv(path).columns) == ["x0", "x1", "x2"]
        np.testing.assert_allclose(load_vectors_csv(path).data, samples)

    def test_empty_csv(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("x0,x1\n")
        with pytest.raises(EmptyDatasetError):
            load_vectors_csv(path)

    def test_pgm(self, tmp_path):
        image = np.array([[0, 128], [255, 64]], dtype=np.uint8)
        path = write_pgm(tmp_path / "img.pgm", image)
        assert path.read_bytes().startswith(b"P5\n2 2\n255\n")
        np.testing.assert_array_equal(read_pgm(path), image)

    def test_image_grid(self):
        samples = np.ones((5, 6))
        grid = image_grid(samples, (2, 3), columns=3, padding=1)
        assert grid.shape == (2 * 3 + 1, 3 * 4 + 1)
        assert grid[1, 1] == 255 and grid[0, 0] == 0
