"""Synthetic cervigram-like imagery for tests and desk-scale experiments.

Images are colored ellipses ("cervix") on a dark field; positive samples
carry bright acetowhite-style blobs inside the ellipse.  The generator also
emits per-image blob masks so explanation heatmaps can be scored against
known ground truth, and groups images by synthetic patient so split-safety
tests have realistic structure.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .dataset import MANIFEST_HEADER


@dataclass
class SynthImage:
    image: np.ndarray  # H x W x 3 uint8
    blob_mask: np.ndarray  # H x W bool, empty for negatives
    ellipse_box: tuple[float, float, float, float]  # x0, y0, x1, y1


def _ellipse_mask(size: int, center, axes, angle) -> np.ndarray:
    m = np.zeros((size, size), np.uint8)
    cv2.ellipse(
        m,
        (int(round(center[0])), int(round(center[1]))),
        (int(round(axes[0])), int(round(axes[1]))),
        float(angle),
        0,
        360,
        255,
        -1,
    )
    return m > 0


def synth_cervigram(
    rng: np.random.Generator,
    positive: bool,
    size: int = 224,
    geometry: dict | None = None,
) -> SynthImage:
    """Render one synthetic cervigram.

    ``geometry`` carries patient-level base parameters so repeated calls can
    produce correlated images of the same synthetic patient; each call still
    jitters pose and color.  Negatives carry the same lesion-shaped region in
    a tissue-like tone (a decoy), so class evidence is strictly the local
    whitening and not overall tissue coverage.
    """
    g = geometry or sample_patient_geometry(rng, positive)
    jitter = lambda scale: rng.uniform(-scale, scale)  # noqa: E731

    cx = (g["cx"] + jitter(0.02)) * size
    cy = (g["cy"] + jitter(0.02)) * size
    ax = (g["ax"] + jitter(0.02)) * size
    ay = (g["ay"] + jitter(0.02)) * size
    angle = g["angle"] + jitter(10.0)

    img = np.empty((size, size, 3), np.float32)
    img[:] = np.asarray(g["bg_color"], np.float32)
    img += rng.normal(0.0, 0.012, size=img.shape).astype(np.float32)

    cervix = _ellipse_mask(size, (cx, cy), (ax, ay), angle)
    tint = np.asarray(g["tissue_color"], np.float32) + jitter(0.03)
    img[cervix] = tint + rng.normal(0.0, 0.02, size=(int(cervix.sum()), 3)).astype(np.float32)

    # cervical os: a small darker ellipse near the center
    os_mask = _ellipse_mask(size, (cx, cy), (ax * 0.16, ay * 0.12), angle)
    img[os_mask] *= 0.45

    alpha = np.zeros((size, size), np.float32)
    for bx, by, br in g["blobs"]:
        bcx = cx + bx * ax + jitter(0.01) * size
        bcy = cy + by * ay + jitter(0.01) * size
        # radius relative to the minor semi-axis keeps the lesion interior
        r = max(3.0, br * min(ax, ay) * (1.0 + jitter(0.03)))
        blob = np.zeros((size, size), np.float32)
        cv2.circle(blob, (int(round(bcx)), int(round(bcy))), int(round(r)), 1.0, -1)
        alpha = np.maximum(alpha, blob)
    # soft lesion margin, as acetowhite regions have in practice
    k = max(3, (size // 32) * 2 + 1)
    alpha = cv2.GaussianBlur(alpha, (k, k), 0) * cervix

    blob_mask = np.zeros((size, size), bool)
    if positive:
        blob_mask = alpha > 0.5
        color = np.asarray([0.97, 0.95, 0.93], np.float32)
    else:
        color = np.asarray(g["tissue_color"], np.float32) * rng.uniform(0.88, 1.08)
    img = img * (1.0 - alpha[..., None]) + alpha[..., None] * (
        color + rng.normal(0.0, 0.01, size=img.shape).astype(np.float32)
    )

    img = np.clip(img, 0.0, 1.0)
    box = (cx - ax, cy - ay, cx + ax, cy + ay)
    return SynthImage(
        image=(img * 255.0 + 0.5).astype(np.uint8),
        blob_mask=blob_mask,
        ellipse_box=box,
    )


def sample_patient_geometry(rng: np.random.Generator, positive: bool) -> dict:
    # one lesion-scale region per patient, strictly interior to the ellipse;
    # see synth_cervigram for how the positive/negative rendering differs
    theta = rng.uniform(0, 2 * np.pi)
    rho = rng.uniform(0.0, 0.10)
    blobs = [(rho * np.cos(theta), rho * np.sin(theta), rng.uniform(0.72, 0.92))]
    return {
        "cx": rng.uniform(0.44, 0.56),
        "cy": rng.uniform(0.44, 0.56),
        "ax": rng.uniform(0.32, 0.42),
        "ay": rng.uniform(0.30, 0.40),
        "angle": rng.uniform(0.0, 180.0),
        "bg_color": (0.09, 0.05, 0.06),
        "tissue_color": (
            rng.uniform(0.80, 0.90),
            rng.uniform(0.38, 0.50),
            rng.uniform(0.45, 0.58),
        ),
        "blobs": blobs,
    }


@dataclass
class GeneratedDataset:
    manifest_path: Path
    image_dir: Path
    mask_dir: Path
    n_images: int
    n_positive: int


def mask_path_for(image_path: str | Path) -> Path:
    image_path = Path(image_path)
    return image_path.parent.parent / "masks" / f"{image_path.stem}_mask.png"


def generate_dataset(
    out_dir: str | Path,
    n_patients: int,
    seed: int,
    size: int = 224,
    positive_rate: float = 0.5,
    images_per_patient: tuple[int, int] = (1, 5),
) -> GeneratedDataset:
    """Write a patient-grouped synthetic dataset plus blob masks and a manifest."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    mask_dir = out_dir / "masks"
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    rows = []
    n_positive = 0
    for p in range(n_patients):
        patient_id = f"synth{p:04d}"
        positive = bool(rng.random() < positive_rate)
        geometry = sample_patient_geometry(rng, positive)
        n_images = int(rng.integers(images_per_patient[0], images_per_patient[1] + 1))
        for k in range(n_images):
            sample = synth_cervigram(rng, positive, size=size, geometry=geometry)
            name = f"{patient_id}_img{k}"
            img_path = image_dir / f"{name}.png"
            cv2.imwrite(str(img_path), cv2.cvtColor(sample.image, cv2.COLOR_RGB2BGR))
            cv2.imwrite(
                str(mask_dir / f"{name}_mask.png"),
                sample.blob_mask.astype(np.uint8) * 255,
            )
            rows.append(
                {
                    "path": str(img_path.relative_to(out_dir)),
                    "patient_id": patient_id,
                    "source": "SYNTHETIC",
                    "label": "VIA_POSITIVE" if positive else "VIA_NEGATIVE",
                }
            )
            if positive:
                n_positive += 1

    manifest_path = out_dir / "manifest.csv"
    with manifest_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    return GeneratedDataset(
        manifest_path=manifest_path,
        image_dir=image_dir,
        mask_dir=mask_dir,
        n_images=len(rows),
        n_positive=n_positive,
    )


def load_blob_mask(image_path: str | Path) -> np.ndarray:
    mask = cv2.imread(str(mask_path_for(image_path)), cv2.IMREAD_GRAYSCALE)
    if mask is None:
        raise FileNotFoundError(f"no blob mask for {image_path}")
    return mask > 127
