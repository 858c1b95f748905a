"""Raster images, color channels, tiling grids and Sobel gradients."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

CHANNELS = ("red", "green", "blue", "grey", "opp1", "opp2")


@dataclass(frozen=True)
class RasterImage:
    """RGB image with float values in [0, 1], stored as (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = np.repeat(px[:, :, None], 3, axis=2)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "RasterImage":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def crop(self, tile: "Tile") -> "RasterImage":
        return RasterImage(self.pixels[tile.y:tile.y + tile.side, tile.x:tile.x + tile.side])


def load_png(path) -> RasterImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return RasterImage.from_uint8(arr)


def save_png(img: RasterImage | np.ndarray, path) -> None:
    arr = img.to_uint8() if isinstance(img, RasterImage) else np.asarray(img, dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def color_transform(img: RasterImage, channels: Sequence[str]) -> np.ndarray:
    """Stack the requested color planes into an array of shape (C, H, W)."""
    r, g, b = (img.pixels[:, :, i] for i in range(3))
    planes = []
    for name in channels:
        if name == "red":
            planes.append(r)
        elif name == "green":
            planes.append(g)
        elif name == "blue":
            planes.append(b)
        elif name == "grey":
            planes.append((r + g + b) / 3.0)
        elif name == "opp1":
            planes.append((r - g + 1.0) / 2.0)
        elif name == "opp2":
            planes.append((r + g - 2.0 * b + 2.0) / 4.0)
        else:
            raise ValueError(f"unknown channel {name!r}; expected one of {CHANNELS}")
    return np.stack(planes)


@dataclass(frozen=True)
class Tile:
    x: int
    y: int
    side: int

    def contains(self, px: int, py: int) -> bool:
        return self.x <= px < self.x + self.side and self.y <= py < self.y + self.side


def _axis_origins(extent: int, side: int, stride: int) -> list[int]:
    origins = list(range(0, extent - side + 1, stride))
    # edge-clamped extra tile so the far border is covered
    if origins[-1] + side < extent:
        origins.append(extent - side)
    return origins


def tile_grid(img: RasterImage | tuple[int, int], side: int, stride: int) -> list[Tile]:
    """Square tiles on a regular grid, row-major; ``img`` may be a (width, height) pair."""
    width, height = (img.width, img.height) if isinstance(img, RasterImage) else img
    if side <= 0 or stride < 1:
        raise ValueError("tile side must be positive and stride >= 1")
    if side > min(width, height):
        raise ValueError(f"tile side {side} exceeds image extent {width}x{height}")
    xs = _axis_origins(width, side, stride)
    ys = _axis_origins(height, side, stride)
    return [Tile(x, y, side) for y in ys for x in xs]


@dataclass(frozen=True)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray
    norm: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.gx.shape

    @property
    def angle(self) -> np.ndarray:
        return np.arctan2(self.gy, self.gx)


def sobel_gradients(plane: np.ndarray) -> GradientField:
    """Unnormalized 3x3 Sobel responses with replicate padding.

    ``gx`` is positive for intensity increasing with the column index and
    ``gy`` for intensity increasing with the row index.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.shape[0] < 3 or plane.shape[1] < 3:
        raise ValueError(f"Sobel needs a 2-D plane of at least 3x3, got {plane.shape}")
    p = np.pad(plane, 1, mode="edge")
    # separable: smooth [1,2,1] across, difference [-1,0,1] along
    sm_rows = p[:-2, :] + 2.0 * p[1:-1, :] + p[2:, :]
    gx = sm_rows[:, 2:] - sm_rows[:, :-2]
    sm_cols = p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:]
    gy = sm_cols[2:, :] - sm_cols[:-2, :]
    return GradientField(gx, gy, np.hypot(gx, gy))
