# Copyright 2024 D-Wave
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Checkerboard masks splitting positions into a conditioning half A and a transformed half B."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from src import numkit
from src.errors import ShapeError
from src.flow_enums import Half, MaskKind
from src.numkit import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CheckerboardMask:
    """Boolean partition of positions; ``bits`` is True on half A.

    Attributes:
        kind: Spatial 2D parity pattern or seeded permuted 3D pattern.
        shape: ``(H, W)`` for 2D masks, ``(C, H, W)`` for 3D masks.
        bits: Read-only boolean array of ``shape``.
        phase_or_seed: Parity phase (2D) or permutation seed (3D).
    """

    kind: MaskKind
    shape: tuple[int, ...]
    bits: np.ndarray
    phase_or_seed: int

    @property
    def count_a(self) -> int:
        return int(self.bits.sum())

    @property
    def count_b(self) -> int:
        return int(self.bits.size - self.bits.sum())

    def selector(self, half: Half) -> np.ndarray:
        """Boolean array of ``shape`` that is True on ``half``."""
        return self.bits if half is Half.A else ~self.bits

    def indicator(self, half: Half, shape: numkit.Shape) -> np.ndarray:
        """0/1 float array broadcast to a tensor ``shape`` (2D masks repeat over channels)."""
        _, c, h, w = shape
        if self.kind is MaskKind.SPATIAL_2D:
            if self.shape != (h, w):
                raise ShapeError(f"2D mask {self.shape} does not fit spatial size {(h, w)}")
            layout = self.selector(half)[None, None]
        else:
            if self.shape != (c, h, w):
                raise ShapeError(f"3D mask {self.shape} does not fit tensor {(c, h, w)}")
            layout = self.selector(half)[None]
        return np.broadcast_to(layout, shape).astype(np.float64)


def make_mask_2d(height: int, width: int, phase: int) -> CheckerboardMask:
    """Parity mask: position ``(i, j)`` is in half A iff ``(i + j + phase)`` is even."""
    if height < 1 or width < 1 or phase not in (0, 1):
        raise ShapeError(f"invalid 2D mask request {height}x{width}, phase {phase}")
    i, j = np.indices((height, width))
    bits = (i + j + phase) % 2 == 0
    bits.setflags(write=False)
    return CheckerboardMask(MaskKind.SPATIAL_2D, (height, width), bits, phase)


def make_mask_3d(channels: int, height: int, width: int, seed: int) -> CheckerboardMask:
    """Globally permuted mask over ``(C, H, W)``.

    A seeded permutation of the flattened indices is drawn; the first
    ``ceil(C*H*W / 2)`` permuted indices form half A.
    """
    total = channels * height * width
    if total < 2:
        raise ShapeError(f"3D mask needs at least two elements, got {(channels, height, width)}")
    permutation = np.random.default_rng(seed).permutation(total)
    bits = np.zeros(total, dtype=bool)
    bits[permutation[: math.ceil(total / 2)]] = True
    bits = bits.reshape(channels, height, width)
    bits.setflags(write=False)
    return CheckerboardMask(MaskKind.PERMUTED_3D, (channels, height, width), bits, seed)


def apply_mask(x: Tensor, mask: CheckerboardMask, half: Half) -> Tensor:
    """Zero every entry of ``x`` outside ``half``."""
    return numkit.mul(x, numkit.constant(mask.indicator(half, x.shape)))


def patch_grid_for(height: int, width: int, patches: int) -> tuple[int, int]:
    """Arrange ``patches`` as a grid tiling ``(height, width)`` with even-area patches.

    The requested count is laid out as the most square ``rows x cols`` grid; while
    that grid does not tile evenly it is coarsened by halving its larger side, down
    to a single patch.
    """
    if patches < 1:
        raise ShapeError(f"patch count must be positive, got {patches}")
    rows = max(d for d in range(1, int(math.isqrt(patches)) + 1) if patches % d == 0)
    cols = patches // rows

    def tiles(r: int, c: int) -> bool:
        return height % r == 0 and width % c == 0 and (height // r) * (width // c) % 2 == 0

    while not tiles(rows, cols):
        if rows == 1 and cols == 1:
            raise ShapeError(f"{height}x{width} has an odd number of positions")
        if rows >= cols:
            rows = max(1, rows // 2)
        else:
            cols = max(1, cols // 2)
    if rows * cols != patches:
        logger.debug("patch grid for %dx%d coarsened to %dx%d", height, width, rows, cols)
    return rows, cols


def patch_index(
    mask: CheckerboardMask, half: Half, patch_grid: tuple[int, int] | None = None
) -> np.ndarray:
    """Flat spatial indices of ``half``, one row per patch, row-major inside each patch.

    Returns:
        np.ndarray: Integer array of shape ``(P, m)``.
    """
    if mask.kind is not MaskKind.SPATIAL_2D:
        raise ShapeError("patchwise gathering needs a 2D mask")
    height, width = mask.shape
    rows, cols = (1, 1) if patch_grid is None else patch_grid
    if height % rows or width % cols:
        raise ShapeError(f"patch grid {rows}x{cols} does not tile {height}x{width}")
    ph, pw = height // rows, width // cols
    selected = mask.selector(half)
    index = []
    for pi in range(rows):
        for pj in range(cols):
            block = selected[pi * ph : (pi + 1) * ph, pj * pw : (pj + 1) * pw]
            i, j = np.nonzero(block)
            index.append((i + pi * ph) * width + (j + pj * pw))
    if len({len(row) for row in index}) != 1:
        raise ShapeError(f"patch grid {rows}x{cols} splits half {half.name} unevenly")
    return np.array(index, dtype=np.intp)


def gather_half(
    x: Tensor, mask: CheckerboardMask, half: Half, patch_grid: tuple[int, int] | None = None
) -> Tensor:
    """Collect the positions of ``half``, patch by patch.

    Returns:
        Tensor: Shape ``(B, C, P, m)``; ``out[b, :, p, :].T`` is the positions x
        channels matrix of patch ``p``.
    """
    if mask.shape != x.shape[2:]:
        raise ShapeError(f"mask {mask.shape} does not fit tensor {x.shape}")
    return numkit.gather_positions(x, patch_index(mask, half, patch_grid))


def scatter_half(
    rows: Tensor,
    mask: CheckerboardMask,
    half: Half,
    patch_grid: tuple[int, int] | None = None,
) -> Tensor:
    """Place gathered rows back on their positions; everything else is zero."""
    return numkit.scatter_positions(rows, patch_index(mask, half, patch_grid), mask.shape)
