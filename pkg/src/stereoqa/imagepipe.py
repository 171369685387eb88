"""Image decoding, luma conversion, and the fixed 32x32/stride-24 patch grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ContractError, FormatError

PATCH_SIZE = 32
PATCH_STRIDE = 24

# Rec.601 luma weights.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class GrayImage:
    """Single-channel image, pixel values in [0, 1], row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ContractError(f"GrayImage expects 2-d pixels, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ContractError("GrayImage pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchPair:
    """Co-located normalized left/right patches plus their inherited labels."""

    left: np.ndarray          # [1, 32, 32]
    right: np.ndarray         # [1, 32, 32]
    source_id: str
    dmos: float
    nss_label: np.ndarray = field(default=None)


def to_luma(raster: np.ndarray) -> GrayImage:
    """Convert an 8-bit raster (HxW or HxWx3) to a [0,1] luma image."""
    arr = np.asarray(raster)
    if arr.ndim == 2:
        return GrayImage(arr.astype(np.float64) / 255.0)
    if arr.ndim == 3 and arr.shape[2] == 3:
        luma = arr.astype(np.float64) @ _LUMA_WEIGHTS
        return GrayImage(np.clip(luma / 255.0, 0.0, 1.0))
    raise FormatError(f"unsupported raster shape {arr.shape}; expected gray or RGB")


def load_image(path) -> GrayImage:
    """Read an 8-bit PNG or BMP file and convert to luma."""
    with Image.open(path) as img:
        if img.format not in (None, "PNG", "BMP"):
            raise FormatError(f"unsupported image format {img.format!r} for {path}")
        if img.mode == "L":
            return to_luma(np.asarray(img))
        if img.mode in ("RGB", "RGBA"):
            return to_luma(np.asarray(img.convert("RGB")))
        if img.mode in ("I", "I;16", "P", "LA"):
            return to_luma(np.asarray(img.convert("L")))
    raise FormatError(f"unsupported image mode for {path}")


def extract_patch_grid(h: int, w: int, size: int = PATCH_SIZE,
                       stride: int = PATCH_STRIDE):
    """Origins (row, col) of the dense patch grid; both views share it."""
    if h < size or w < size:
        raise ContractError(f"image {h}x{w} smaller than a {size}x{size} patch")
    rows = range(0, h - size + 1, stride)
    cols = range(0, w - size + 1, stride)
    return [(r, c) for r in rows for c in cols]


def normalize_patch(patch: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance normalization per patch (epsilon 1e-6)."""
    patch = np.asarray(patch, dtype=np.float64)
    mean = patch.mean()
    std = patch.std()
    return (patch - mean) / (std + 1e-6)


def cut_patch(image: GrayImage, row: int, col: int, size: int = PATCH_SIZE) -> np.ndarray:
    """Normalized [1, size, size] patch at the given origin."""
    window = image.pixels[row:row + size, col:col + size]
    if window.shape != (size, size):
        raise ContractError(f"patch at ({row},{col}) exceeds image bounds")
    return normalize_patch(window)[None, :, :]


def patch_pairs(left: GrayImage, right: GrayImage, source_id: str, dmos: float,
                nss_label=None):
    """All co-located normalized patch pairs for one stereo sample."""
    if (left.height, left.width) != (right.height, right.width):
        raise ContractError(
            f"left {left.height}x{left.width} and right {right.height}x{right.width} "
            "views differ in size; unequal views are rejected, not resampled")
    grid = extract_patch_grid(left.height, left.width)
    return [PatchPair(left=cut_patch(left, r, c), right=cut_patch(right, r, c),
                      source_id=source_id, dmos=dmos, nss_label=nss_label)
            for r, c in grid]
