"""Per-channel dataset normalization and the seeded augmentation pipeline.

Normalization subtracts the per-channel mean and divides by the per-channel
standard deviation, with both moments computed over every pixel of the
training split only (population convention).  Augmentation is an ordered
list of probabilistic transforms; a fixed seed makes the whole pipeline a
pure function of its inputs.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import cv2
import numpy as np

from .dataset import DatasetIndex, Split, SplitAssignment
from .raster import Domain, Raster, load_unit, normalized_raster, require_domain, unit_raster

MIN_STD = 1e-7


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    computed_over: str
    record_count: int
    flagged_channels: tuple[int, ...] = ()

    def to_json(self, path: str | Path) -> None:
        payload = {
            "mean": [round(m, 6) for m in self.mean],
            "std": [round(s, 6) for s in self.std],
            "computed_over": self.computed_over,
            "record_count": self.record_count,
            "flagged_channels": list(self.flagged_channels),
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "ChannelStats":
        p = json.loads(Path(path).read_text())
        return cls(
            mean=tuple(p["mean"]),
            std=tuple(p["std"]),
            computed_over=p["computed_over"],
            record_count=int(p["record_count"]),
            flagged_channels=tuple(p.get("flagged_channels", ())),
        )

    def as_dict(self) -> dict:
        return {
            "mean": list(self.mean),
            "std": list(self.std),
            "computed_over": self.computed_over,
            "record_count": self.record_count,
            "flagged_channels": list(self.flagged_channels),
        }


def compute_channel_stats(
    images: Iterable[Raster], computed_over: str = "train"
) -> ChannelStats:
    """Exact per-channel population moments over all pixels of all images.

    Near-constant channels (std below 1e-7) are floored to 1e-7 and flagged
    so downstream normalization stays finite.
    """
    total = np.zeros(3, np.float64)
    total_sq = np.zeros(3, np.float64)
    n_pixels = 0
    n_images = 0
    for img in images:
        require_domain(img, Domain.UNIT, "compute_channel_stats")
        data = img.data.astype(np.float64)
        total += data.sum(axis=(0, 1))
        total_sq += (data * data).sum(axis=(0, 1))
        n_pixels += data.shape[0] * data.shape[1]
        n_images += 1
    if n_images == 0:
        raise StatsError("need at least one image to compute channel stats")
    mean = total / n_pixels
    var = np.maximum(total_sq / n_pixels - mean * mean, 0.0)
    std = np.sqrt(var)
    flagged = tuple(int(c) for c in range(3) if std[c] < MIN_STD)
    std = np.maximum(std, MIN_STD)
    return ChannelStats(
        mean=tuple(float(m) for m in mean),
        std=tuple(float(s) for s in std),
        computed_over=computed_over,
        record_count=n_images,
        flagged_channels=flagged,
    )


def channel_stats_for_split(
    index: DatasetIndex,
    assignment: SplitAssignment,
    split: Split = Split.TRAIN,
    loader: Callable[[Path], Raster] = load_unit,
) -> ChannelStats:
    """Compute stats strictly from the given split; the loader is injectable
    so tests can assert no out-of-split image is ever read."""
    wanted = set(assignment.record_ids(split))
    images = (loader(r.image_ref) for r in index.records if r.record_id in wanted)
    return compute_channel_stats(images, computed_over=split.value.lower())


def normalize(img: Raster, stats: ChannelStats) -> Raster:
    require_domain(img, Domain.UNIT, "normalize")
    mean = np.asarray(stats.mean, np.float32)
    std = np.asarray(stats.std, np.float32)
    return normalized_raster((img.data - mean) / std)


def denormalize(img: Raster, stats: ChannelStats) -> Raster:
    """Algebraic inverse of normalize; values falling outside [0, 1] (possible
    after augmentation in normalized space) are clamped back into range."""
    require_domain(img, Domain.NORMALIZED, "denormalize")
    mean = np.asarray(stats.mean, np.float32)
    std = np.asarray(stats.std, np.float32)
    return unit_raster(np.clip(img.data * std + mean, 0.0, 1.0))


def derive_seed(*parts) -> int:
    """Stable per-sample seed from e.g. (global_seed, record_id, epoch)."""
    digest = hashlib.blake2b(
        "\x1f".join(str(p) for p in parts).encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


class FlipMode(enum.Enum):
    H = "H"
    V = "V"
    BOTH = "BOTH"


@dataclass(frozen=True)
class AugmentationSpec:
    """The published augmentation policy: per-transform probability plus
    parameters, applied in this fixed order.  Contrast limit and blur kernel
    sizes are configuration defaults, not published values."""

    flip_p: float = 0.5
    contrast_p: float = 0.1
    contrast_limit: float = 0.2
    shift_scale_rotate_p: float = 0.7
    shift_limit: float = 0.1
    scale_limit: float = 0.1
    rotate_limit: float = 180.0
    blur_p: float = 0.1
    blur_kernels: tuple[int, ...] = (3, 5, 7)
    grid_shuffle_p: float = 0.1
    grid: int = 3
    coarse_dropout_p: float = 0.7
    dropout_max_patches: int = 20
    dropout_patch: int = 4
    dropout_fill: float = 0.0

    TRANSFORM_ORDER = (
        "flip",
        "random_contrast",
        "shift_scale_rotate",
        "blur",
        "grid_shuffle",
        "coarse_dropout",
    )

    def __post_init__(self) -> None:
        for name in (
            "flip_p",
            "contrast_p",
            "shift_scale_rotate_p",
            "blur_p",
            "grid_shuffle_p",
            "coarse_dropout_p",
        ):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")

    def probabilities(self) -> dict[str, float]:
        return {
            "flip": self.flip_p,
            "random_contrast": self.contrast_p,
            "shift_scale_rotate": self.shift_scale_rotate_p,
            "blur": self.blur_p,
            "grid_shuffle": self.grid_shuffle_p,
            "coarse_dropout": self.coarse_dropout_p,
        }

    @classmethod
    def disabled(cls) -> "AugmentationSpec":
        return cls(
            flip_p=0.0,
            contrast_p=0.0,
            shift_scale_rotate_p=0.0,
            blur_p=0.0,
            grid_shuffle_p=0.0,
            coarse_dropout_p=0.0,
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "AugmentationSpec":
        p = json.loads(Path(path).read_text())
        p["blur_kernels"] = tuple(p.get("blur_kernels", (3, 5, 7)))
        return cls(**p)


def _finish(img: Raster, data: np.ndarray) -> Raster:
    # UNIT rasters stay in [0, 1]; normalized rasters are unbounded by design.
    if img.domain is Domain.UNIT:
        data = np.clip(data, 0.0, 1.0)
    return Raster(np.ascontiguousarray(data, dtype=np.float32), img.domain)


def apply_flip(img: Raster, mode: FlipMode) -> Raster:
    if mode is FlipMode.H:
        out = img.data[:, ::-1]
    elif mode is FlipMode.V:
        out = img.data[::-1, :]
    else:
        out = img.data[::-1, ::-1]
    return _finish(img, out)


def apply_random_contrast(img: Raster, factor: float) -> Raster:
    pivot = float(img.data.mean())
    return _finish(img, pivot + (img.data - pivot) * factor)


def apply_shift_scale_rotate(
    img: Raster, shift: tuple[float, float], scale: float, angle: float
) -> Raster:
    """Shift fractions are relative to width/height; reflection padding and
    bilinear sampling avoid introducing artificial dark borders."""
    h, w = img.data.shape[:2]
    m = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, scale)
    m[0, 2] += shift[0] * w
    m[1, 2] += shift[1] * h
    out = cv2.warpAffine(
        img.data,
        m,
        (w, h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REFLECT_101,
    )
    return _finish(img, out)


def apply_blur(img: Raster, kernel: int) -> Raster:
    return _finish(img, cv2.blur(img.data, (kernel, kernel)))


def _grid_bounds(extent: int, grid: int) -> list[tuple[int, int]]:
    edges = [int(round(extent * i / grid)) for i in range(grid + 1)]
    return [(edges[i], edges[i + 1]) for i in range(grid)]


def apply_grid_shuffle(img: Raster, grid: int = 3, seed: int | None = None,
                       rng: np.random.Generator | None = None) -> Raster:
    """Split into a grid at rounded fractions and permute the cells.

    When the extent does not divide evenly, cells are permuted only within
    groups of identical shape, which keeps the pixel multiset of each group
    (and the raster shape) intact.
    """
    h, w = img.data.shape[:2]
    if h < grid or w < grid:
        raise ValueError(f"image {h}x{w} too small for a {grid}x{grid} grid")
    if rng is None:
        rng = np.random.default_rng(seed)
    rows = _grid_bounds(h, grid)
    cols = _grid_bounds(w, grid)
    cells = [(r, c) for r in range(grid) for c in range(grid)]
    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for r, c in cells:
        shape = (rows[r][1] - rows[r][0], cols[c][1] - cols[c][0])
        groups.setdefault(shape, []).append((r, c))
    out = img.data.copy()
    for shape in sorted(groups):
        members = groups[shape]
        perm = rng.permutation(len(members))
        for dst_idx, src_idx in enumerate(perm):
            (dr, dc), (sr, sc) = members[dst_idx], members[src_idx]
            out[rows[dr][0]:rows[dr][1], cols[dc][0]:cols[dc][1]] = img.data[
                rows[sr][0]:rows[sr][1], cols[sc][0]:cols[sc][1]
            ]
    return _finish(img, out)


def draw_dropout_patches(
    shape: tuple[int, int],
    max_patches: int,
    rng: np.random.Generator,
) -> list[tuple[int, int]]:
    """k ~ Uniform{1..max_patches} top-left corners, anywhere in the image;
    patches extending past the border are clipped on application."""
    h, w = shape
    k = int(rng.integers(1, max_patches + 1))
    return [(int(rng.integers(0, h)), int(rng.integers(0, w))) for _ in range(k)]


def apply_coarse_dropout(
    img: Raster,
    max_patches: int = 20,
    patch: int = 4,
    fill: float = 0.0,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> Raster:
    h, w = img.data.shape[:2]
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} smaller than the {patch}x{patch} patch")
    if rng is None:
        rng = np.random.default_rng(seed)
    out = img.data.copy()
    for y, x in draw_dropout_patches((h, w), max_patches, rng):
        out[y : y + patch, x : x + patch] = fill
    return _finish(img, out)


def augment(
    img: Raster,
    spec: AugmentationSpec,
    seed: int,
    return_trace: bool = False,
) -> Raster | tuple[Raster, list[str]]:
    """Apply the policy's transforms in order, each fired by an independent
    Bernoulli draw from a single seeded stream.  Pure for a fixed seed."""
    rng = np.random.default_rng(seed)
    fired: list[str] = []
    out = img

    if rng.random() < spec.flip_p:
        fired.append("flip")
        mode = (FlipMode.H, FlipMode.V, FlipMode.BOTH)[int(rng.integers(0, 3))]
        out = apply_flip(out, mode)
    if rng.random() < spec.contrast_p:
        fired.append("random_contrast")
        factor = float(rng.uniform(1.0 - spec.contrast_limit, 1.0 + spec.contrast_limit))
        out = apply_random_contrast(out, factor)
    if rng.random() < spec.shift_scale_rotate_p:
        fired.append("shift_scale_rotate")
        shift = (
            float(rng.uniform(-spec.shift_limit, spec.shift_limit)),
            float(rng.uniform(-spec.shift_limit, spec.shift_limit)),
        )
        scale = float(rng.uniform(1.0 - spec.scale_limit, 1.0 + spec.scale_limit))
        angle = float(rng.uniform(-spec.rotate_limit, spec.rotate_limit))
        out = apply_shift_scale_rotate(out, shift, scale, angle)
    if rng.random() < spec.blur_p:
        fired.append("blur")
        kernel = int(spec.blur_kernels[int(rng.integers(0, len(spec.blur_kernels)))])
        out = apply_blur(out, kernel)
    if rng.random() < spec.grid_shuffle_p:
        fired.append("grid_shuffle")
        out = apply_grid_shuffle(out, grid=spec.grid, rng=rng)
    if rng.random() < spec.coarse_dropout_p:
        fired.append("coarse_dropout")
        out = apply_coarse_dropout(
            out,
            max_patches=spec.dropout_max_patches,
            patch=spec.dropout_patch,
            fill=spec.dropout_fill,
            rng=rng,
        )

    if return_trace:
        return out, fired
    return out
