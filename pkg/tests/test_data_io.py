import os
import struct
import tempfile
import unittest

import numpy as np
import pandas as pd

from src import data_io
from src.errors import ConfigError, DataFormatError, IdxFormatError
from src.flow_enums import DatasetKind
from src.run_config import DataConfig


class TestIdx(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.images = np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 1, 4, 4)

    def tearDown(self):
        self.tmp.cleanup()

    def test_read_written_images(self):
        """Test IDX images come back as (N, 1, H, W) bytes, plain or gzipped"""
        for name in ("images.idx", "images.idx.gz"):
            path = os.path.join(self.tmp.name, name)
            data_io.idx_write(path, self.images)

            images = data_io.idx_read(path)

            # Check values
            self.assertEqual(images.dtype, np.uint8)
            np.testing.assert_array_equal(images, self.images)

    def test_labels(self):
        """Test label files come back one-dimensional"""
        path = os.path.join(self.tmp.name, "labels.idx")
        data_io.idx_write(path, np.array([3, 1, 4], dtype=np.uint8))

        # Check values
        np.testing.assert_array_equal(data_io.idx_read(path), [3, 1, 4])

    def test_bad_magic(self):
        """Test an unknown magic number is a format error with exit code 2"""
        path = os.path.join(self.tmp.name, "bad.idx")
        with open(path, "wb") as handle:
            handle.write(struct.pack(">I", 0x00000802) + b"\x00" * 8)

        with self.assertRaises(IdxFormatError) as ctx:
            data_io.idx_read(path)

        # Check the message and exit code
        self.assertIn("0x00000802", str(ctx.exception))
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_truncated_payload(self):
        """Test a payload shorter than the header promises is rejected"""
        path = os.path.join(self.tmp.name, "short.idx")
        data_io.idx_write(path, self.images)
        with open(path, "rb") as handle:
            raw = handle.read()
        with open(path, "wb") as handle:
            handle.write(raw[:-5])

        with self.assertRaises(IdxFormatError) as ctx:
            data_io.idx_read(path)

        # Check the message names the sizes
        self.assertIn("expected 32 payload bytes", str(ctx.exception))

    def test_missing_file(self):
        """Test reading a missing file is a data error"""
        with self.assertRaises(DataFormatError):
            data_io.idx_read(os.path.join(self.tmp.name, "missing.idx"))


class TestPreprocessing(unittest.TestCase):
    def test_dequantize_bins(self):
        """Test each level k lands in [k / 256, (k + 1) / 256)"""
        levels = np.array([0, 17, 255], dtype=np.uint8).reshape(1, 1, 1, 3)

        x = data_io.dequantize(levels, np.random.default_rng(0))

        # Check values
        self.assertTrue((x >= levels / 256).all())
        self.assertTrue((x < (levels.astype(float) + 1) / 256).all())

    def test_dequantize_rejects_out_of_range(self):
        """Test levels outside [0, 255] are rejected with their index"""
        with self.assertRaises(DataFormatError) as ctx:
            data_io.dequantize(np.array([1, 256]), np.random.default_rng(0))

        # Check the message carries the index
        self.assertIn("(1,)", str(ctx.exception))

    def test_downscale_area(self):
        """Test area downscaling averages 2x2 blocks"""
        x = np.arange(16.0).reshape(1, 1, 4, 4)

        # Check values
        np.testing.assert_array_equal(
            data_io.downscale_area(x, 2)[0, 0], [[2.5, 4.5], [10.5, 12.5]]
        )

    def test_center_crop(self):
        """Test the crop keeps the central window"""
        x = np.arange(16).reshape(1, 1, 4, 4)

        # Check values
        np.testing.assert_array_equal(data_io.center_crop(x, 2)[0, 0], [[5, 6], [9, 10]])


class TestToyDatasets(unittest.TestCase):
    def test_seeded_samples(self):
        """Test a toy dataset is determined by its seed"""
        first = data_io.toy2d_grid("rings", 8, 16, seed=3)
        again = data_io.toy2d_grid("rings", 8, 16, seed=3)

        # Check kind, shape and determinism
        self.assertEqual(first.kind, DatasetKind.TOY2D_GRID)
        self.assertEqual(first.shape, (1, 8, 8))
        self.assertEqual(first.levels.dtype, np.uint8)
        np.testing.assert_array_equal(first.levels, again.levels)

    def test_mean_matches_template(self):
        """Test the sample mean of dequantized pixels matches the template"""
        dataset = data_io.toy2d_grid("checker-density", 8, 512, seed=0)

        mean = dataset.dequantized(np.random.default_rng(1)).mean()

        # Check value
        self.assertAlmostEqual(mean, data_io.toy_expected_mean("checker-density", 8), delta=0.005)

    def test_unknown_toy(self):
        """Test an unknown toy name is a configuration error"""
        with self.assertRaises(ConfigError):
            data_io.toy2d_grid("spirals", 8, 4, seed=0)

    def test_templates_are_valid_probabilities(self):
        """Test every template lies inside (0, 1) at both resolutions"""
        for name in ("two-moons", "rings", "checker-density"):
            for resolution in (8, 16):
                template = data_io.toy_template(name, resolution)

                # Check values
                self.assertEqual(template.shape, (resolution, resolution))
                self.assertTrue(((template > 0) & (template < 1)).all())


class TestLoadDataset(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "images.idx")
        data_io.idx_write(self.path, np.full((5, 1, 6, 6), 128, dtype=np.uint8))

    def tearDown(self):
        self.tmp.cleanup()

    def test_idx_with_crop(self):
        """Test an IDX source is truncated to n and cropped"""
        config = DataConfig.from_mapping({"kind": "idx-images", "path": self.path, "n": 3, "crop": 4})

        dataset = data_io.load_dataset(config)

        # Check values
        self.assertEqual(dataset.kind, DatasetKind.IDX_IMAGES)
        self.assertEqual(dataset.levels.shape, (3, 1, 4, 4))

    def test_idx_needs_path(self):
        """Test an IDX source without a path is rejected"""
        with self.assertRaises(ConfigError):
            data_io.load_dataset(DataConfig.from_mapping({"kind": "idx-images"}))

    def test_downscale_condition(self):
        """Test the downscale condition is a blurred copy of the image"""
        config = DataConfig.from_mapping({"n": 4, "condition": "downscale"})

        dataset = data_io.load_dataset(config)
        x, condition = dataset.batch(np.arange(2), np.random.default_rng(0))

        # Check shapes and that 2x2 blocks are constant
        self.assertEqual(dataset.condition.shape, (4, 1, 8, 8))
        self.assertEqual(condition.shape, x.shape)
        np.testing.assert_array_equal(condition.data[:, :, 0, 0], condition.data[:, :, 1, 1])


class TestEmission(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_pgm(self):
        """Test PGM output has a P5 header and rounded 8-bit pixels"""
        path = os.path.join(self.tmp.name, "image.pgm")
        image = np.array([[0.0, 0.5, 1.0], [0.25, 0.999, 0.1]])

        data_io.pgm_write(image, path)

        # Check header
        with open(path, "rb") as handle:
            self.assertTrue(handle.read().startswith(b"P5\n3 2\n255\n"))

        # Check values
        np.testing.assert_array_equal(data_io.pgm_read(path), [[0, 128, 255], [64, 255, 26]])

    def test_tile_grid_pads(self):
        """Test missing tiles are left black"""
        images = np.ones((3, 1, 2, 2))

        grid = data_io.tile_grid(images, 2, 2)

        # Check values
        self.assertEqual(grid.shape, (4, 4))
        self.assertEqual(grid[:2].sum(), 8.0)
        self.assertEqual(grid[2:, 2:].sum(), 0.0)

    def test_csv_append(self):
        """Test the header is written once"""
        path = os.path.join(self.tmp.name, "metrics.csv")

        data_io.csv_append({"iter": 1, "nll": 2.5}, path)
        data_io.csv_append({"iter": 2, "nll": 2.0}, path)

        # Check values
        df = pd.read_csv(path)
        self.assertEqual(list(df.columns), ["iter", "nll"])
        self.assertEqual(df["iter"].tolist(), [1, 2])
