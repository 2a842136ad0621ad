"""Cervix localization and the fixed-size crop fed to the classifier.

The detector itself is pluggable: production deployments load an external
single-shot detector artifact behind the same interface, while the built-in
stub backend finds the largest strongly-colored region with classical image
heuristics so the rest of the pipeline is fully testable offline.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import cv2
import numpy as np

from .raster import Domain, Raster, require_domain, unit_raster


class BackendError(RuntimeError):
    """Detector artifact missing, corrupt, or otherwise unloadable."""


class DegenerateBoxError(ValueError):
    """A crop box collapsed to zero area after clamping."""


Box = tuple[float, float, float, float]  # x_min, y_min, x_max, y_max in pixels


class RoiProvenance(enum.Enum):
    DETECTED = "DETECTED"
    FULL_IMAGE = "FULL_IMAGE"


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_tag: str = "cervix"


@runtime_checkable
class DetectorBackend(Protocol):
    backend_id: str

    def capabilities(self) -> dict: ...

    def detect(self, img: Raster) -> list[Detection]: ...


@dataclass(frozen=True)
class StubDetector:
    """Heuristic backend: the largest high-saturation bright region.

    Deterministic and dependency-free; used for tests and as the fallback
    backend on stations without a detector artifact.
    """

    saturation_threshold: float = 0.30
    value_threshold: float = 0.30
    min_area_fraction: float = 0.003
    backend_id: str = "stub"

    def capabilities(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "max_input_size": None,
            "score_semantics": "mean HSV saturation of the region, in [0, 1]",
        }

    def detect(self, img: Raster) -> list[Detection]:
        require_domain(img, Domain.UNIT, "detect")
        hsv = cv2.cvtColor(img.data, cv2.COLOR_RGB2HSV)
        sat, val = hsv[..., 1], hsv[..., 2]
        mask = ((sat > self.saturation_threshold) & (val > self.value_threshold)).astype(
            np.uint8
        )
        # close pin-holes (e.g. bright acetowhite spots) so a region stays one component
        mask = cv2.morphologyEx(mask, cv2.MORPH_CLOSE, np.ones((5, 5), np.uint8))
        n, labels, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=8)
        h, w = img.data.shape[:2]
        min_area = self.min_area_fraction * h * w
        detections = []
        for i in range(1, n):
            x, y, bw, bh, area = stats[i]
            if area < min_area:
                continue
            region = labels == i
            score = float(np.clip(sat[region].mean(), 0.0, 1.0))
            detections.append(
                Detection(box=(float(x), float(y), float(x + bw), float(y + bh)), score=score)
            )
        detections.sort(key=lambda d: d.score, reverse=True)
        return detections


@dataclass(frozen=True)
class ConfiguredDetector:
    """Backend loaded from an artifact file (a JSON container of detector
    parameters).  External detectors integrate by implementing the
    DetectorBackend protocol and registering their own loader."""

    inner: StubDetector
    artifact_path: str
    backend_id: str = "artifact"

    def capabilities(self) -> dict:
        caps = self.inner.capabilities()
        caps.update({"backend_id": self.backend_id, "artifact": self.artifact_path})
        return caps

    def detect(self, img: Raster) -> list[Detection]:
        return self.inner.detect(img)


DETECTOR_ARTIFACT_FORMAT = "cervia-detector/1"


def save_detector(backend: StubDetector, path: str | Path) -> None:
    payload = {
        "format": DETECTOR_ARTIFACT_FORMAT,
        "params": {
            "saturation_threshold": backend.saturation_threshold,
            "value_threshold": backend.value_threshold,
            "min_area_fraction": backend.min_area_fraction,
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_detector(ref: str | Path) -> DetectorBackend:
    """Resolve "stub" to the built-in backend, else load an artifact file."""
    if str(ref) == "stub":
        return StubDetector()
    path = Path(ref)
    if not path.is_file():
        raise BackendError(f"detector artifact not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BackendError(f"detector artifact unreadable: {path}: {exc}") from exc
    if payload.get("format") != DETECTOR_ARTIFACT_FORMAT:
        raise BackendError(
            f"unsupported detector artifact format {payload.get('format')!r}"
        )
    return ConfiguredDetector(inner=StubDetector(**payload["params"]), artifact_path=str(path))


def full_image_box(img_dims: tuple[int, int]) -> Box:
    h, w = img_dims
    return (0.0, 0.0, float(w), float(h))


def select_roi(
    detections: list[Detection],
    img_dims: tuple[int, int],
    score_threshold: float = 0.3,
    margin: float = 0.05,
) -> tuple[Box, RoiProvenance]:
    """Pick the best-scoring box at or above the threshold, grown by a small
    margin and clamped; fall back to the full image so the pipeline always
    has a usable crop."""
    h, w = img_dims
    candidates = sorted(detections, key=lambda d: d.score, reverse=True)
    for det in candidates:
        if det.score < score_threshold:
            break
        x0, y0, x1, y1 = det.box
        half_w = (x1 - x0) / 2.0 * (1.0 + margin)
        half_h = (y1 - y0) / 2.0 * (1.0 + margin)
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        box = (
            max(0.0, cx - half_w),
            max(0.0, cy - half_h),
            min(float(w), cx + half_w),
            min(float(h), cy + half_h),
        )
        return box, RoiProvenance.DETECTED
    return full_image_box(img_dims), RoiProvenance.FULL_IMAGE


def crop_and_resize(img: Raster, box: Box, target: int = 224) -> Raster:
    """Crop the box and bilinearly resize to target x target (aspect ratio is
    not preserved).  An exact-size crop is returned untouched."""
    require_domain(img, Domain.UNIT, "crop_and_resize")
    h, w = img.data.shape[:2]
    x0 = int(np.clip(round(box[0]), 0, w))
    y0 = int(np.clip(round(box[1]), 0, h))
    x1 = int(np.clip(round(box[2]), 0, w))
    y1 = int(np.clip(round(box[3]), 0, h))
    if x1 <= x0 or y1 <= y0:
        raise DegenerateBoxError(f"box {box} collapsed to zero area within {w}x{h}")
    crop = img.data[y0:y1, x0:x1]
    if crop.shape[0] == target and crop.shape[1] == target:
        return unit_raster(crop.copy())
    out = cv2.resize(crop, (target, target), interpolation=cv2.INTER_LINEAR)
    return unit_raster(np.clip(out, 0.0, 1.0))


def render_detections(img: Raster, detections: list[Detection], box: Box | None = None) -> Raster:
    """Visualization helper: detections in green, the selected box in red."""
    canvas = (img.data * 255.0).astype(np.uint8).copy()
    for det in detections:
        x0, y0, x1, y1 = (int(round(v)) for v in det.box)
        cv2.rectangle(canvas, (x0, y0), (x1, y1), (0, 255, 0), 2)
        cv2.putText(
            canvas,
            f"{det.score:.2f}",
            (x0 + 2, max(12, y0 - 4)),
            cv2.FONT_HERSHEY_SIMPLEX,
            0.4,
            (0, 255, 0),
            1,
        )
    if box is not None:
        x0, y0, x1, y1 = (int(round(v)) for v in box)
        cv2.rectangle(canvas, (x0, y0), (x1, y1), (255, 0, 0), 2)
    return unit_raster(canvas.astype(np.float32) / 255.0)
