"""Truncated MobileNetV2 classifier.

The backbone keeps the inverted-residual plan up to the first 160-channel
stage and drops everything after it; the head is dropout on the final
feature map, global max pooling, and a single-logit fully connected layer.
Backbone module names follow the standard full-network layout so ImageNet
checkpoints load by name-matched prefix, with truncated-away keys ignored.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .dataset import ViaLabel


class ShapeError(ValueError):
    pass


class WeightLoadError(RuntimeError):
    pass


class Mode(enum.Enum):
    TRAIN = "TRAIN"
    EVAL = "EVAL"


@dataclass(frozen=True)
class BottleneckSpec:
    expansion_t: int
    out_channels: int
    repeats: int
    stride: int

    def __post_init__(self) -> None:
        if self.expansion_t < 1:
            raise ValueError(f"expansion factor must be >= 1, got {self.expansion_t}")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {self.out_channels}")


# (t, c_out, n, s) rows of the truncated backbone plan
DEFAULT_GROUPS: tuple[tuple[int, int, int, int], ...] = (
    (1, 16, 1, 1),
    (6, 24, 1, 2),
    (6, 24, 1, 1),
    (6, 32, 1, 2),
    (6, 32, 2, 1),
    (6, 64, 1, 2),
    (6, 64, 3, 1),
    (6, 96, 3, 1),
    (6, 160, 1, 2),
)


@dataclass(frozen=True)
class BackboneSpec:
    input_size: int = 224
    stem_channels: int = 32
    stem_stride: int = 2
    groups: tuple[BottleneckSpec, ...] = tuple(
        BottleneckSpec(*row) for row in DEFAULT_GROUPS
    )
    dropout: float = 0.2

    @classmethod
    def default(cls) -> "BackboneSpec":
        return cls()

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "stem_channels": self.stem_channels,
            "stem_stride": self.stem_stride,
            "groups": [
                [g.expansion_t, g.out_channels, g.repeats, g.stride] for g in self.groups
            ],
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(
            input_size=int(d["input_size"]),
            stem_channels=int(d["stem_channels"]),
            stem_stride=int(d["stem_stride"]),
            groups=tuple(BottleneckSpec(*row) for row in d["groups"]),
            dropout=float(d["dropout"]),
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "BackboneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class BlockStructure:
    ops: tuple[str, ...]
    residual: bool


def bottleneck_shape(
    in_shape: tuple[int, int, int], t: int, c_out: int, stride: int
) -> tuple[tuple[int, int, int], BlockStructure]:
    """Shape transition and layer plan of a single inverted-residual block."""
    h, w, c = in_shape
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if h % stride or w % stride:
        raise ShapeError(f"input {h}x{w} not divisible by stride {stride}")
    ops: list[str] = []
    if t != 1:
        ops.append(f"conv1x1 {c}->{t * c}, relu6")
    ops.append(f"dwconv3x3 s{stride} on {t * c}, relu6")
    ops.append(f"conv1x1 {t * c}->{c_out}, linear")
    residual = stride == 1 and c == c_out
    return (h // stride, w // stride, c_out), BlockStructure(tuple(ops), residual)


def stage_output_shapes(spec: BackboneSpec) -> list[tuple[int, int, int]]:
    """Output shape after the stem and after each bottleneck group."""
    s = spec.stem_stride
    shape = (spec.input_size // s, spec.input_size // s, spec.stem_channels)
    shapes = [shape]
    for g in spec.groups:
        for i in range(g.repeats):
            stride = g.stride if i == 0 else 1
            shape, _ = bottleneck_shape(shape, g.expansion_t, g.out_channels, stride)
        shapes.append(shape)
    return shapes


def summary_rows(spec: BackboneSpec) -> list[dict]:
    """Layer-plan table (one row per operator) for conformance diffing."""
    rows = [
        {
            "input": f"{spec.input_size}^2 x 3",
            "operator": "conv2d",
            "t": None,
            "c": spec.stem_channels,
            "n": 1,
            "s": spec.stem_stride,
        }
    ]
    size = spec.input_size // spec.stem_stride
    channels = spec.stem_channels
    for g in spec.groups:
        rows.append(
            {
                "input": f"{size}^2 x {channels}",
                "operator": "bottleneck",
                "t": g.expansion_t,
                "c": g.out_channels,
                "n": g.repeats,
                "s": g.stride,
            }
        )
        size //= g.stride
        channels = g.out_channels
    rows.append({"input": f"{size}^2 x {channels}", "operator": "(output)", "t": None,
                 "c": None, "n": None, "s": None})
    return rows


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 groups: int = 1):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel, stride, (kernel - 1) // 2, groups=groups,
                      bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU6(inplace=True),
        )


class InvertedResidual(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, expansion: int):
        super().__init__()
        hidden = in_ch * expansion
        self.use_residual = stride == 1 and in_ch == out_ch
        layers: list[nn.Module] = []
        if expansion != 1:
            layers.append(ConvBNReLU(in_ch, hidden, kernel=1))
        layers.extend(
            [
                ConvBNReLU(hidden, hidden, stride=stride, groups=hidden),
                nn.Conv2d(hidden, out_ch, 1, 1, 0, bias=False),
                nn.BatchNorm2d(out_ch),
            ]
        )
        self.conv = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.use_residual:
            return x + self.conv(x)
        return self.conv(x)


class Head(nn.Module):
    """Dropout acts on the feature map (published order), then global max
    pooling collapses space, then a single-logit fully connected layer."""

    def __init__(self, in_ch: int, dropout: float):
        super().__init__()
        self.drop = nn.Dropout(dropout)
        self.fc = nn.Linear(in_ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.drop(x)
        x = torch.amax(x, dim=(2, 3))
        return self.fc(x).squeeze(1)


class TruncatedMobileNetV2(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        features: list[nn.Module] = [
            ConvBNReLU(3, spec.stem_channels, stride=spec.stem_stride)
        ]
        channels = spec.stem_channels
        for g in spec.groups:
            for i in range(g.repeats):
                stride = g.stride if i == 0 else 1
                features.append(InvertedResidual(channels, g.out_channels, stride,
                                                 g.expansion_t))
                channels = g.out_channels
        self.features = nn.Sequential(*features)
        self.head = Head(channels, spec.dropout)
        self.out_channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class ModelHandle:
    module: TruncatedMobileNetV2
    spec: BackboneSpec
    mode: Mode = Mode.EVAL


@dataclass
class WeightLoadReport:
    loaded: list[str]
    ignored_checkpoint_keys: list[str]
    randomly_initialized: list[str]


def load_backbone_weights(
    module: TruncatedMobileNetV2, checkpoint: dict
) -> WeightLoadReport:
    """Copy name-matched backbone tensors from a full-network checkpoint.

    Keys absent from this (truncated) graph are ignored; a present key with
    the wrong shape is an error naming the layer.
    """
    own = module.state_dict()
    loaded, left = [], []
    for name, tensor in own.items():
        if not name.startswith("features."):
            left.append(name)
            continue
        if name not in checkpoint:
            left.append(name)
            continue
        src = checkpoint[name]
        if tuple(src.shape) != tuple(tensor.shape):
            raise WeightLoadError(
                f"shape mismatch for layer {name!r}: checkpoint {tuple(src.shape)} "
                f"vs model {tuple(tensor.shape)}"
            )
        own[name] = src.clone() if isinstance(src, torch.Tensor) else torch.as_tensor(src)
        loaded.append(name)
    module.load_state_dict(own)
    ignored = [k for k in checkpoint if k not in own]
    return WeightLoadReport(loaded=loaded, ignored_checkpoint_keys=ignored,
                            randomly_initialized=left)


def build_model(
    spec: BackboneSpec,
    pretrained: str | Path | dict | None = None,
    seed: int | None = None,
) -> ModelHandle:
    """Construct the graph; optionally load backbone weights from a full
    MobileNetV2 checkpoint.  The fully connected head is always initialized
    from the glorot-uniform distribution."""
    if seed is not None:
        torch.manual_seed(seed)
    module = TruncatedMobileNetV2(spec)
    if pretrained is not None:
        if isinstance(pretrained, (str, Path)):
            checkpoint = torch.load(pretrained, map_location="cpu", weights_only=True)
        else:
            checkpoint = pretrained
        load_backbone_weights(module, checkpoint)
    nn.init.xavier_uniform_(module.head.fc.weight)
    nn.init.zeros_(module.head.fc.bias)
    module.eval()
    return ModelHandle(module=module, spec=spec, mode=Mode.EVAL)


def set_mode(handle: ModelHandle, mode: Mode) -> None:
    handle.mode = mode
    handle.module.train(mode is Mode.TRAIN)


def _as_nchw(batch: np.ndarray | torch.Tensor, input_size: int) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
    else:
        t = batch.float()
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4 or t.shape[3] != 3:
        raise ShapeError(f"expected B x H x W x 3 batch, got {tuple(t.shape)}")
    if t.shape[1] != input_size or t.shape[2] != input_size:
        raise ShapeError(
            f"expected {input_size}x{input_size} inputs, got {t.shape[1]}x{t.shape[2]}"
        )
    if not torch.isfinite(t).all():
        raise ValueError("batch contains NaN or Inf values")
    return t.permute(0, 3, 1, 2).contiguous()


def forward(handle: ModelHandle, batch: np.ndarray | torch.Tensor) -> np.ndarray:
    """Logits for a B x H x W x 3 batch of normalized pixels."""
    x = _as_nchw(batch, handle.spec.input_size)
    if handle.mode is Mode.EVAL:
        with torch.no_grad():
            logits = handle.module(x)
    else:
        logits = handle.module(x)
    out = logits.detach().cpu().numpy().reshape(-1)
    if not np.isfinite(out).all():
        raise ValueError("model produced non-finite logits")
    return out


def classify(logit: float, threshold: float = 0.5) -> tuple[ViaLabel, float]:
    """Sigmoid probability with a positive verdict at or above the threshold."""
    if not math.isfinite(logit):
        raise ValueError(f"logit must be finite, got {logit}")
    probability = 1.0 / (1.0 + math.exp(-logit))
    label = ViaLabel.VIA_POSITIVE if probability >= threshold else ViaLabel.VIA_NEGATIVE
    return label, probability


def trainable_parameter_count(handle: ModelHandle) -> int:
    return sum(p.numel() for p in handle.module.parameters() if p.requires_grad)
