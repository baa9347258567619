import unittest

import numpy as np

from src import masking
from src.errors import ShapeError
from src.flow_enums import Half, MaskKind
from src.numkit import Tensor


class TestMasks(unittest.TestCase):
    def test_mask_2d_parity(self):
        """Test the 2D mask alternates by parity and the phase flips it"""
        mask = masking.make_mask_2d(4, 4, 0)
        flipped = masking.make_mask_2d(4, 4, 1)

        # Check (0, 0) is in half A for phase 0 and in half B for phase 1
        self.assertTrue(mask.bits[0, 0])
        self.assertFalse(flipped.bits[0, 0])

        # Check the halves are equal and complementary between phases
        self.assertEqual(mask.count_a, 8)
        self.assertEqual(mask.count_b, 8)
        np.testing.assert_array_equal(mask.bits, ~flipped.bits)

    def test_mask_3d_is_seeded(self):
        """Test permuted masks depend only on their seed"""
        first = masking.make_mask_3d(2, 4, 4, 5)
        again = masking.make_mask_3d(2, 4, 4, 5)
        other = masking.make_mask_3d(2, 4, 4, 6)

        # Check determinism and sensitivity to the seed
        np.testing.assert_array_equal(first.bits, again.bits)
        self.assertFalse(np.array_equal(first.bits, other.bits))

        # Check the halves split the 32 elements evenly
        self.assertEqual(first.kind, MaskKind.PERMUTED_3D)
        self.assertEqual(first.count_a, 16)

    def test_apply_mask_partitions(self):
        """Test the two halves of a tensor add back up to the tensor"""
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
        mask = masking.make_mask_2d(4, 4, 1)

        a = masking.apply_mask(x, mask, Half.A)
        b = masking.apply_mask(x, mask, Half.B)

        # Check values
        np.testing.assert_array_equal(a.data + b.data, x.data)
        self.assertTrue((a.data[:, :, ~mask.bits] == 0).all())

    def test_mask_shape_mismatch(self):
        """Test a mask for another spatial size is rejected"""
        mask = masking.make_mask_2d(4, 4, 0)

        with self.assertRaises(ShapeError):
            masking.apply_mask(Tensor(np.zeros((1, 1, 2, 2))), mask, Half.A)

    def test_half_other(self):
        """Test each half names the other"""
        self.assertIs(Half.A.other, Half.B)
        self.assertIs(Half.B.other, Half.A)


class TestPatches(unittest.TestCase):
    def test_patch_grid(self):
        """Test patch grids are square when possible and coarsened when they cannot tile"""
        # Check four patches on 8x8 form a 2x2 grid
        self.assertEqual(masking.patch_grid_for(8, 8, 4), (2, 2))

        # Check 2x2 patches of a 2x2 input hold one position each and are coarsened
        self.assertEqual(masking.patch_grid_for(2, 2, 4), (1, 2))

        # Check a single patch is kept
        self.assertEqual(masking.patch_grid_for(4, 4, 1), (1, 1))

    def test_patch_index(self):
        """Test per-patch indices list each half's positions row-major"""
        mask = masking.make_mask_2d(4, 4, 0)

        index_a = masking.patch_index(mask, Half.A, (2, 2))
        index_b = masking.patch_index(mask, Half.B, (2, 2))

        # Check shapes
        self.assertEqual(index_a.shape, (4, 2))
        self.assertEqual(index_b.shape, (4, 2))

        # Check the top-left patch
        self.assertEqual(list(index_a[0]), [0, 5])
        self.assertEqual(list(index_b[0]), [1, 4])

        # Check together the halves cover every position once
        covered = np.sort(np.concatenate([index_a.ravel(), index_b.ravel()]))
        np.testing.assert_array_equal(covered, np.arange(16))

    def test_gather_scatter_half(self):
        """Test scattering gathered halves restores the masked tensor"""
        x = Tensor(np.random.default_rng(1).normal(size=(1, 2, 4, 4)))
        mask = masking.make_mask_2d(4, 4, 0)

        rows = masking.gather_half(x, mask, Half.B, (2, 2))
        back = masking.scatter_half(rows, mask, Half.B, (2, 2))

        # Check values
        self.assertEqual(rows.shape, (1, 2, 4, 2))
        np.testing.assert_array_equal(back.data, masking.apply_mask(x, mask, Half.B).data)

    def test_patch_index_needs_2d_mask(self):
        """Test patchwise gathering with a permuted mask is rejected"""
        with self.assertRaises(ShapeError):
            masking.patch_index(masking.make_mask_3d(1, 4, 4, 0), Half.A)
