"""Confusion-matrix metrics and gradient-weighted activation heatmaps."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import ViaLabel
from .model import Mode, ModelHandle, classify
from .preprocess import ChannelStats
from .raster import Domain, Raster, require_domain, unit_raster


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    tn: int
    fp: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


def _to_binary(labels: Sequence) -> np.ndarray:
    out = []
    for v in labels:
        if isinstance(v, ViaLabel):
            out.append(1 if v is ViaLabel.VIA_POSITIVE else 0)
        else:
            out.append(int(v))
    return np.asarray(out, dtype=np.int64)


def confusion(preds: Sequence, truth: Sequence) -> ConfusionMatrix:
    """Counts with VIA_POSITIVE as the positive class."""
    if len(preds) != len(truth):
        raise MetricsError(f"length mismatch: {len(preds)} predictions vs {len(truth)} labels")
    if len(preds) == 0:
        raise MetricsError("need at least one prediction")
    p = _to_binary(preds)
    t = _to_binary(truth)
    return ConfusionMatrix(
        tp=int(((p == 1) & (t == 1)).sum()),
        fn=int(((p == 0) & (t == 1)).sum()),
        tn=int(((p == 0) & (t == 0)).sum()),
        fp=int(((p == 1) & (t == 0)).sum()),
    )


def metrics(cm: ConfusionMatrix) -> dict:
    """Accuracy, sensitivity, specificity; a ratio with a zero denominator is
    reported as None (undefined), never as 0."""
    if cm.n == 0:
        raise MetricsError("empty confusion matrix")
    sens = cm.tp / (cm.tp + cm.fn) if (cm.tp + cm.fn) > 0 else None
    spec = cm.tn / (cm.tn + cm.fp) if (cm.tn + cm.fp) > 0 else None
    return {
        "accuracy": (cm.tp + cm.tn) / cm.n,
        "sensitivity": sens,
        "specificity": spec,
        "undefined": tuple(
            name for name, v in (("sensitivity", sens), ("specificity", spec)) if v is None
        ),
    }


@dataclass
class EvalReport:
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    cm: ConfusionMatrix
    split_tag: str
    predictions: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "split": self.split_tag,
            "confusion": {"tp": self.cm.tp, "fn": self.cm.fn, "tn": self.cm.tn,
                          "fp": self.cm.fp},
            "accuracy": round(self.accuracy, 4),
            "sensitivity": None if self.sensitivity is None else round(self.sensitivity, 4),
            "specificity": None if self.specificity is None else round(self.specificity, 4),
            "predictions": self.predictions,
        }


def predict(
    handle: ModelHandle,
    images: np.ndarray,
    stats: ChannelStats,
    batch_size: int = 32,
    threshold: float = 0.5,
) -> tuple[list[int], list[float], list[float]]:
    """Normalize UNIT image stacks and classify; returns (labels, probabilities, logits)."""
    from .model import forward

    mean = np.asarray(stats.mean, np.float32)
    std = np.asarray(stats.std, np.float32)
    labels: list[int] = []
    probs: list[float] = []
    logits_out: list[float] = []
    for start in range(0, len(images), batch_size):
        batch = (images[start : start + batch_size] - mean) / std
        logits = forward(handle, batch)
        for logit in logits:
            label, prob = classify(float(logit), threshold)
            labels.append(1 if label is ViaLabel.VIA_POSITIVE else 0)
            probs.append(prob)
            logits_out.append(float(logit))
    return labels, probs, logits_out


def evaluate(
    handle: ModelHandle,
    images: np.ndarray,
    truth: Sequence,
    stats: ChannelStats,
    split_tag: str = "test",
    batch_size: int = 32,
    threshold: float = 0.5,
    record_ids: Sequence[str] | None = None,
) -> EvalReport:
    preds, probs, _ = predict(handle, images, stats, batch_size, threshold)
    cm = confusion(preds, truth)
    m = metrics(cm)
    predictions = []
    for i, (p, prob) in enumerate(zip(preds, probs)):
        predictions.append(
            {
                "record_id": record_ids[i] if record_ids else str(i),
                "predicted": ViaLabel.VIA_POSITIVE.value if p else ViaLabel.VIA_NEGATIVE.value,
                "probability": round(prob, 6),
            }
        )
    return EvalReport(
        accuracy=m["accuracy"],
        sensitivity=m["sensitivity"],
        specificity=m["specificity"],
        cm=cm,
        split_tag=split_tag,
        predictions=predictions,
    )


@dataclass
class GradcamMap:
    heatmap: np.ndarray  # raw-resolution map, min-max scaled to [0, 1]
    upsampled: np.ndarray  # input-resolution map in [0, 1]
    target_layer: str
    overlay: Raster | None = None  # rendered by overlay(), attached by callers


GRADCAM_EPS = 1e-12


def gradcam(
    handle: ModelHandle,
    img: np.ndarray | Raster,
    target_layer: str = "features",
) -> GradcamMap:
    """Heatmap of the input regions driving the logit.

    Channel weights are the spatial mean of d(logit)/d(activation) at the
    target layer; the map is the ReLU of the weighted activation sum, min-max
    scaled to [0, 1] (an all-zero map stays zero), bilinearly upsampled to
    the model input size.
    """
    if handle.mode is not Mode.EVAL:
        raise ValueError("gradcam requires the model in EVAL mode")
    if isinstance(img, Raster):
        require_domain(img, Domain.NORMALIZED, "gradcam")
        data = img.data
    else:
        data = np.asarray(img, np.float32)

    module = handle.module
    named = dict(module.named_modules())
    if target_layer not in named:
        raise ValueError(f"unknown target layer {target_layer!r}")
    layer = named[target_layer]

    captured: dict[str, torch.Tensor] = {}

    def hook(_module, _inputs, output):
        captured["activation"] = output

    handle_id = layer.register_forward_hook(hook)
    try:
        x = torch.from_numpy(np.ascontiguousarray(data, np.float32))
        if x.ndim == 3:
            x = x.unsqueeze(0)
        x = x.permute(0, 3, 1, 2).contiguous()
        x.requires_grad_(False)
        with torch.enable_grad():
            logit = module(x)
            activation = captured["activation"]
            grads = torch.autograd.grad(logit.sum(), activation)[0]
    finally:
        handle_id.remove()

    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((weights * activation).sum(dim=1)).squeeze(0).detach().numpy()
    peak = cam.max()
    if peak > GRADCAM_EPS:
        low = cam.min()
        cam = (cam - low) / max(peak - low, GRADCAM_EPS)
    else:
        cam = np.zeros_like(cam)

    up = F.interpolate(
        torch.from_numpy(cam[None, None].astype(np.float32)),
        size=(handle.spec.input_size, handle.spec.input_size),
        mode="bilinear",
        align_corners=False,
    )[0, 0].numpy()
    return GradcamMap(heatmap=cam.astype(np.float32), upsampled=np.clip(up, 0.0, 1.0),
                      target_layer=target_layer)


_JET_STOPS = np.array(
    [
        (0.0, (0.0, 0.0, 0.5)),
        (0.125, (0.0, 0.0, 1.0)),
        (0.375, (0.0, 1.0, 1.0)),
        (0.625, (1.0, 1.0, 0.0)),
        (0.875, (1.0, 0.0, 0.0)),
        (1.0, (0.5, 0.0, 0.0)),
    ],
    dtype=object,
)


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] scalars to a cold-to-hot RGB ramp (jet-style)."""
    xs = np.array([s[0] for s in _JET_STOPS], np.float32)
    cols = np.array([s[1] for s in _JET_STOPS], np.float32)
    v = np.clip(values, 0.0, 1.0)
    out = np.empty(v.shape + (3,), np.float32)
    for c in range(3):
        out[..., c] = np.interp(v, xs, cols[:, c])
    return out


def overlay(img: Raster, heatmap: np.ndarray, blend: float = 0.4) -> Raster:
    """Alpha-blend the colormapped heatmap over a UNIT image."""
    require_domain(img, Domain.UNIT, "overlay")
    heat = np.asarray(heatmap, np.float32)
    if heat.shape != img.data.shape[:2]:
        heat = F.interpolate(
            torch.from_numpy(heat[None, None]),
            size=img.data.shape[:2],
            mode="bilinear",
            align_corners=False,
        )[0, 0].numpy()
    color = heat_colormap(heat)
    blended = (1.0 - blend) * img.data + blend * color
    return unit_raster(np.clip(blended, 0.0, 1.0))
