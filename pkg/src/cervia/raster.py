"""Raster images with an explicit value-domain tag.

Every pipeline stage exchanges H x W x 3 float32 arrays.  The domain tag
distinguishes plain [0, 1] pixel data (UNIT) from statistics-normalized
data (NORMALIZED), so stages can reject inputs from the wrong side of the
normalization boundary instead of silently producing garbage.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class Domain(enum.Enum):
    UNIT = "unit"
    NORMALIZED = "normalized"


class DomainError(ValueError):
    """An operation received a raster from the wrong value domain."""


@dataclass(frozen=True)
class Raster:
    data: np.ndarray
    domain: Domain

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"expected an H x W x 3 array, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("raster contains NaN or Inf values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def unit_raster(data: np.ndarray) -> Raster:
    return Raster(np.asarray(data, dtype=np.float32), Domain.UNIT)


def normalized_raster(data: np.ndarray) -> Raster:
    return Raster(np.asarray(data, dtype=np.float32), Domain.NORMALIZED)


def require_domain(img: Raster, domain: Domain, op: str) -> None:
    if img.domain is not domain:
        raise DomainError(f"{op} expects a {domain.value} raster, got {img.domain.value}")


def from_uint8(arr: np.ndarray) -> Raster:
    """Map an 8-bit H x W x 3 array onto the [0, 1] pixel scale."""
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 array, got {arr.dtype}")
    return unit_raster(arr.astype(np.float32) / 255.0)


def to_uint8(img: Raster) -> np.ndarray:
    require_domain(img, Domain.UNIT, "to_uint8")
    return np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)


def load_unit(path: str | Path) -> Raster:
    """Decode an image file into a UNIT raster (RGB, [0, 1])."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def save_unit(img: Raster, path: str | Path) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def decode_unit(data: bytes) -> Raster:
    """Decode raw image bytes (PNG/JPEG) into a UNIT raster."""
    import io

    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def transpose_uint8(arr: np.ndarray) -> np.ndarray:
    """Swap image axes (H x W x C -> W x H x C); an involution on rasters."""
    return np.ascontiguousarray(np.swapaxes(arr, 0, 1))
