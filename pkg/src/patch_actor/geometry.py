"""Patch-grid coordinate algebra.

Everything downstream lives on a row-major grid of square patches with the
origin at the top-left corner of the image. Index ``i`` maps to column
``i % cols`` and row ``i // cols``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptySupervision, InvalidArgument

DEFAULT_EPSILON = 1e-6

# Products like 0.3 * 10 land a hair above 3.0 in binary floating point; snap
# values this close to an integer before floor/ceil.
_SNAP = 1e-9


@dataclass(frozen=True)
class PatchGrid:
    cols: int
    rows: int
    patch_px: int
    image_w_px: int
    image_h_px: int

    def __post_init__(self):
        for name in ("cols", "rows", "patch_px", "image_w_px", "image_h_px"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if self.cols != -(-self.image_w_px // self.patch_px) or self.rows != -(-self.image_h_px // self.patch_px):
            raise InvalidArgument("grid dims must be the ceiling division of image dims by patch size")

    @property
    def size(self) -> int:
        return self.cols * self.rows

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols), the numpy order."""
        return self.rows, self.cols

    def to_json(self) -> dict:
        return {
            "cols": self.cols,
            "rows": self.rows,
            "patch_px": self.patch_px,
            "image_w_px": self.image_w_px,
            "image_h_px": self.image_h_px,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatchGrid":
        cols, rows, patch = int(obj["cols"]), int(obj["rows"]), int(obj["patch_px"])
        return cls(
            cols,
            rows,
            patch,
            int(obj.get("image_w_px", cols * patch)),
            int(obj.get("image_h_px", rows * patch)),
        )


def make_grid(image_w_px: int, image_h_px: int, patch_px: int) -> PatchGrid:
    if min(image_w_px, image_h_px, patch_px) < 1:
        raise InvalidArgument(
            f"image dims and patch size must be positive, got {image_w_px}x{image_h_px} / {patch_px}"
        )
    cols = -(-image_w_px // patch_px)
    rows = -(-image_h_px // patch_px)
    return PatchGrid(cols, rows, patch_px, image_w_px, image_h_px)


@dataclass(frozen=True)
class NormBBox:
    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self):
        if not (0.0 <= self.left <= self.right <= 1.0 and 0.0 <= self.top <= self.bottom <= 1.0):
            raise InvalidArgument(f"invalid normalized bbox {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.left, self.top, self.right, self.bottom]

    @classmethod
    def from_list(cls, values) -> "NormBBox":
        left, top, right, bottom = (float(v) for v in values)
        return cls(left, top, right, bottom)

    @classmethod
    def from_pixels(cls, left, top, right, bottom, image_w_px, image_h_px) -> "NormBBox":
        return cls(left / image_w_px, top / image_h_px, right / image_w_px, bottom / image_h_px)

    def center(self) -> tuple[float, float]:
        return (self.left + self.right) / 2, (self.top + self.bottom) / 2

    def contains(self, x: float, y: float) -> bool:
        """Inclusive containment of a normalized point."""
        return bool(self.left <= x <= self.right and self.top <= y <= self.bottom)


@dataclass(frozen=True, eq=False)
class PatchMask:
    grid: PatchGrid
    bits: np.ndarray

    def __post_init__(self):
        if self.bits.shape != (self.grid.size,):
            raise InvalidArgument("mask length must equal grid.cols * grid.rows")

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def as_2d(self) -> np.ndarray:
        return self.bits.reshape(self.grid.shape)

    def __eq__(self, other):
        return isinstance(other, PatchMask) and self.grid == other.grid and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True, eq=False)
class TargetDistribution:
    grid: PatchGrid
    probs: np.ndarray
    epsilon: float


def _span(lo: float, hi: float, n: int) -> tuple[int, int]:
    """Half-open index range [start, stop) of cells touched by [lo, hi] on n cells."""
    start = math.floor(lo * n + _SNAP)
    if hi > lo:
        stop = math.ceil(hi * n - _SNAP)
    else:
        # point annotation: the cell holding the point
        stop = start + 1
    start = min(max(start, 0), n - 1)
    stop = min(max(stop, start + 1), n)
    return start, stop


def bbox_patch_span(bbox: NormBBox, grid: PatchGrid) -> tuple[int, int, int, int]:
    """Return (col0, row0, col1, row1), half-open, of patches under the box."""
    c0, c1 = _span(bbox.left, bbox.right, grid.cols)
    r0, r1 = _span(bbox.top, bbox.bottom, grid.rows)
    return c0, r0, c1, r1


def rasterize_bbox(bbox: NormBBox, grid: PatchGrid) -> PatchMask:
    c0, r0, c1, r1 = bbox_patch_span(bbox, grid)
    bits = np.zeros(grid.shape, dtype=np.uint8)
    bits[r0:r1, c0:c1] = 1
    return PatchMask(grid, bits.reshape(-1))


def target_from_mask(mask: PatchMask, epsilon: float = DEFAULT_EPSILON) -> TargetDistribution:
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be positive")
    n = mask.count
    if n == 0:
        raise EmptySupervision()
    probs = mask.bits.astype(np.float64) / (n + epsilon)
    return TargetDistribution(mask.grid, probs, epsilon)


def patch_center_px(index: int, grid: PatchGrid) -> tuple[float, float]:
    if not 0 <= index < grid.size:
        raise InvalidArgument(f"patch index {index} outside [0, {grid.size})")
    row, col = divmod(int(index), grid.cols)
    x = min((col + 0.5) * grid.patch_px, grid.image_w_px - 1)
    y = min((row + 0.5) * grid.patch_px, grid.image_h_px - 1)
    return float(x), float(y)


def patch_centers(grid: PatchGrid) -> np.ndarray:
    """(M, 2) array of every patch center, same clamping as patch_center_px."""
    cols = np.minimum((np.arange(grid.cols) + 0.5) * grid.patch_px, grid.image_w_px - 1)
    rows = np.minimum((np.arange(grid.rows) + 0.5) * grid.patch_px, grid.image_h_px - 1)
    xx, yy = np.meshgrid(cols, rows)
    return np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)


def patch_index_at(x_px: float, y_px: float, grid: PatchGrid) -> int:
    """Index of the patch holding a pixel point, clamped onto the grid."""
    col = min(max(int(math.floor(x_px / grid.patch_px)), 0), grid.cols - 1)
    row = min(max(int(math.floor(y_px / grid.patch_px)), 0), grid.rows - 1)
    return row * grid.cols + col
