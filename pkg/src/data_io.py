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

"""Dataset ingestion (IDX files and rasterized toy densities) and image/metric emission."""
from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import pandas as pd

from app_configs import TOY_DATASETS, TOY_RESOLUTIONS
from src.errors import ConfigError, DataFormatError, IdxFormatError, ShapeError
from src.flow_enums import DatasetKind
from src.numkit import Tensor
from src.run_config import DataConfig

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
QUANTIZATION_LEVELS = 256

METRICS_COLUMNS = ["iter", "nll", "bpd", "grad_norm", "wall_ms"]

# Expected intensities of the bright and dim toy cells, as fractions of 255.
TOY_HIGH = 0.8
TOY_LOW = 0.2


##########################
# IDX                    #
##########################


def _open(path: str, mode: str):
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def idx_read(path: str) -> np.ndarray:
    """Read an IDX file of unsigned bytes.

    Images (magic ``0x00000803``) come back as ``(N, 1, H, W)`` and labels (magic
    ``0x00000801``) as ``(N,)``, both ``uint8``. Gzipped files are read when the
    path ends in ``.gz``.

    Raises:
        IdxFormatError: Bad magic number or truncated header/payload.
    """
    try:
        with _open(path, "rb") as handle:
            raw = handle.read()
    except OSError as err:
        raise DataFormatError(f"cannot read {path}: {err.strerror}") from None

    if len(raw) < 4:
        raise IdxFormatError(f"{path}: expected a 4-byte magic number, found {len(raw)} bytes")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise IdxFormatError(f"{path}: bad magic number 0x{magic:08x}")
    ndim = magic & 0xFF
    header_size = 4 + 4 * ndim
    if len(raw) < header_size:
        raise IdxFormatError(
            f"{path}: expected {header_size} header bytes, found {len(raw)}"
        )
    dims = struct.unpack(f">{ndim}I", raw[4:header_size])
    expected = int(np.prod(dims))
    actual = len(raw) - header_size
    if actual != expected:
        raise IdxFormatError(
            f"{path}: expected {expected} payload bytes after offset {header_size}, found {actual}"
        )
    data = np.frombuffer(raw, dtype=np.uint8, offset=header_size).reshape(dims)
    if magic == IDX_IMAGES_MAGIC:
        data = data[:, None, :, :]
    logger.debug("read %s with shape %s", path, data.shape)
    return data.copy()


def idx_write(path: str, array: np.ndarray) -> None:
    """Write ``(N, H, W)`` or ``(N, 1, H, W)`` images, or ``(N,)`` labels, as IDX."""
    array = np.asarray(array)
    if array.ndim == 4:
        if array.shape[1] != 1:
            raise ShapeError(f"IDX images are single-channel, got shape {array.shape}")
        array = array[:, 0]
    if array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise ShapeError(f"cannot write shape {array.shape} as IDX")
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    with _open(path, "wb") as handle:
        handle.write(header + array.astype(np.uint8).tobytes())


##########################
# Preprocessing          #
##########################


def downscale_area(x: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks of a ``(B, C, H, W)`` array."""
    x = np.asarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"{h}x{w} is not divisible by downscale factor {factor}")
    return x.reshape(b, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def center_crop(x: np.ndarray, size: int) -> np.ndarray:
    h, w = x.shape[-2:]
    if size > min(h, w):
        raise ShapeError(f"cannot crop {h}x{w} to {size}x{size}")
    top, left = (h - size) // 2, (w - size) // 2
    return x[..., top : top + size, left : left + size]


def dequantize(levels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Map integer levels ``k`` in ``[0, 255]`` to ``(k + u) / 256`` with ``u ~ U[0, 1)``.

    Raises:
        DataFormatError: A level is not an integer in ``[0, 255]``.
    """
    levels = np.asarray(levels)
    bad = (levels < 0) | (levels > QUANTIZATION_LEVELS - 1) | (levels != np.floor(levels))
    if bad.any():
        position = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataFormatError(f"pixel level {levels[position]} out of range at index {position}")
    noise = rng.random(levels.shape)
    return (levels.astype(np.float64) + noise) / QUANTIZATION_LEVELS


##########################
# Toy densities          #
##########################


def _cell_centers(resolution: int, low: float, high: float) -> np.ndarray:
    step = (high - low) / resolution
    return low + step * (np.arange(resolution) + 0.5)


def _scale_template(density: np.ndarray) -> np.ndarray:
    density = density / density.max()
    return TOY_LOW / 4 + (TOY_HIGH - TOY_LOW / 4) * density


def toy_template(name: str, resolution: int) -> np.ndarray:
    """Expected intensity (as a fraction of 255) of every cell of a toy density image.

    Raises:
        ConfigError: Unknown name or unsupported resolution.
    """
    if name not in TOY_DATASETS:
        raise ConfigError(f"unknown toy dataset {name!r}; choose from {', '.join(TOY_DATASETS)}")
    if resolution not in TOY_RESOLUTIONS:
        raise ConfigError(f"toy resolution must be one of {TOY_RESOLUTIONS}, got {resolution}")

    if name == "checker-density":
        block = resolution // 4
        i, j = np.indices((resolution, resolution))
        return np.where((i // block + j // block) % 2 == 0, TOY_HIGH, TOY_LOW)

    if name == "rings":
        coords = _cell_centers(resolution, -1.0, 1.0)
        gy, gx = np.meshgrid(coords, coords, indexing="ij")
        radius = np.hypot(gx, gy)
        density = sum(np.exp(-0.5 * ((radius - r) / 0.12) ** 2) for r in (0.35, 0.8))
        return _scale_template(density)

    # two-moons: Gaussian ridges along two interleaved half circles
    xs = _cell_centers(resolution, -1.25, 2.25)
    ys = _cell_centers(resolution, -1.5, 2.0)
    gy, gx = np.meshgrid(ys[::-1], xs, indexing="ij")
    angles = np.linspace(0.0, np.pi, 64)
    arcs = np.concatenate(
        [
            np.stack([np.cos(angles), np.sin(angles)], axis=1),
            np.stack([1.0 - np.cos(angles), 0.5 - np.sin(angles)], axis=1),
        ]
    )
    density = np.zeros_like(gx)
    for ax, ay in arcs:
        density += np.exp(-0.5 * ((gx - ax) ** 2 + (gy - ay) ** 2) / 0.2**2)
    return _scale_template(density)


def toy_expected_mean(name: str, resolution: int) -> float:
    """Mean dequantized pixel value implied by the template."""
    template = toy_template(name, resolution)
    return float(((QUANTIZATION_LEVELS - 1) * template + 0.5).mean() / QUANTIZATION_LEVELS)


##########################
# Datasets               #
##########################


@dataclass
class Dataset:
    """Integer pixel levels plus an optional condition image per sample.

    Attributes:
        kind: Source of the samples.
        levels: ``uint8`` array ``(N, 1, H, W)`` of quantized pixels.
        meta: Source description (path or toy name, count, shape).
        condition: Optional float array ``(N, C_c, H, W)`` in ``[0, 1)``.
    """

    kind: DatasetKind
    levels: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)
    condition: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.levels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.levels.shape[1:])

    def dequantized(self, rng: np.random.Generator, indices: np.ndarray | None = None) -> np.ndarray:
        levels = self.levels if indices is None else self.levels[indices]
        return dequantize(levels, rng)

    def batch(
        self, indices: np.ndarray, rng: np.random.Generator
    ) -> tuple[Tensor, Tensor | None]:
        """Dequantized samples at ``indices`` and their conditions."""
        x = Tensor(self.dequantized(rng, indices))
        if self.condition is None:
            return x, None
        return x, Tensor(self.condition[indices])

    def with_downscale_condition(self, factor: int) -> Dataset:
        """Attach the area-downscaled, nearest-upsampled image as each sample's condition."""
        centers = (self.levels.astype(np.float64) + 0.5) / QUANTIZATION_LEVELS
        condition = upsample_nearest(downscale_area(centers, factor), factor)
        meta = dict(self.meta, condition=f"downscale x{factor}")
        return Dataset(self.kind, self.levels, meta, condition)


def toy2d_grid(name: str, resolution: int, n: int, seed: int) -> Dataset:
    """Sample ``n`` quantized images whose pixels are ``Binomial(255, template)``."""
    template = toy_template(name, resolution)
    rng = np.random.default_rng(seed)
    levels = rng.binomial(QUANTIZATION_LEVELS - 1, template, size=(n, 1, resolution, resolution))
    meta = {"source": name, "count": n, "shape": (1, resolution, resolution)}
    return Dataset(DatasetKind.TOY2D_GRID, levels.astype(np.uint8), meta)


def load_dataset(config: DataConfig) -> Dataset:
    """Load the dataset described by a ``[data]`` section."""
    if config.kind is DatasetKind.TOY2D_GRID:
        dataset = toy2d_grid(config.name, config.resolution, config.n, config.seed)
    else:
        if not config.path:
            raise ConfigError("[data] path is required for idx-images")
        images = idx_read(config.path)
        if images.ndim != 4:
            raise IdxFormatError(f"{config.path}: holds labels, expected images")
        images = images[: config.n]
        if config.crop:
            images = center_crop(images, config.crop)
        if config.downscale > 1:
            images = np.rint(downscale_area(images, config.downscale)).astype(np.uint8)
        meta = {"source": config.path, "count": images.shape[0], "shape": images.shape[1:]}
        dataset = Dataset(DatasetKind.IDX_IMAGES, images, meta)
    if config.condition == "downscale":
        dataset = dataset.with_downscale_condition(config.condition_factor)
    logger.info("loaded %s: %d samples of shape %s", dataset.meta["source"], dataset.size, dataset.shape)
    return dataset


##########################
# Emission               #
##########################


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Round ``[0, 1)`` values to 8-bit levels, ``floor(x * 255 + 0.5)``."""
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255 + 0.5), 0, 255).astype(
        np.uint8
    )


def pgm_write(image: np.ndarray, path: str) -> None:
    """Write a single-channel image as binary PGM (P5, maxval 255).

    Args:
        image: ``(H, W)`` array, or a ``(1, 1, H, W)`` / ``(1, H, W)`` single image.
        path: Output file.
    """
    image = np.asarray(image)
    image = image.reshape(image.shape[-2:]) if image.size == np.prod(image.shape[-2:]) else image
    if image.ndim != 2:
        raise ShapeError(f"PGM needs a single-channel image, got shape {image.shape}")
    height, width = image.shape
    payload = f"P5\n{width} {height}\n255\n".encode("ascii") + to_bytes(image).tobytes()
    try:
        with open(path, "wb") as handle:
            handle.write(payload)
    except OSError as err:
        raise DataFormatError(f"cannot write {path}: {err.strerror}") from None


def pgm_read(path: str) -> np.ndarray:
    """Read a binary PGM written by :func:`pgm_write` as a ``uint8`` array."""
    with open(path, "rb") as handle:
        raw = handle.read()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise DataFormatError(f"{path}: not a P5 PGM with maxval 255")
    width, height = (int(v) for v in parts[1].split())
    payload = parts[3]
    if len(payload) != width * height:
        raise DataFormatError(
            f"{path}: expected {width * height} pixel bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def tile_grid(images: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Tile ``(N, 1, H, W)`` images row-major into one ``(rows*H, cols*W)`` image."""
    images = np.asarray(images)
    n, _, h, w = images.shape
    grid = np.zeros((rows * h, cols * w))
    for k in range(min(n, rows * cols)):
        r, c = divmod(k, cols)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = images[k, 0]
    return grid


def csv_append(row: Mapping[str, Any], path: str) -> None:
    """Append one row; the header is written only when the file is new."""
    exists = os.path.exists(path) and os.path.getsize(path) > 0
    try:
        pd.DataFrame([dict(row)]).to_csv(path, mode="a", header=not exists, index=False)
    except OSError as err:
        raise DataFormatError(f"cannot write {path}: {err.strerror}") from None
