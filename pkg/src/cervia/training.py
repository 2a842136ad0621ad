"""Training recipe: weighted binary focal loss, Adam with plateau decay,
early stopping on validation loss, an epoch cap, and a multi-run harness.

Controller semantics are centralized here and pinned by tests: "does not
decrease for more than N epochs" means the stall counter exceeding N, and
an improvement must beat the best value by a small epsilon.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import DatasetIndex, Split, SplitAssignment, ViaLabel
from .model import (
    BackboneSpec,
    Mode,
    ModelHandle,
    build_model,
    set_mode,
)
from .preprocess import (
    AugmentationSpec,
    ChannelStats,
    augment,
    compute_channel_stats,
    derive_seed,
)
from .raster import load_unit, normalized_raster, unit_raster
from .roi import DetectorBackend, crop_and_resize, full_image_box, select_roi


class SingleClassError(ValueError):
    pass


class TrainingAbortedError(RuntimeError):
    def __init__(self, message: str, epoch: int, lr: float):
        super().__init__(f"{message} (epoch {epoch}, lr {lr:g})")
        self.epoch = epoch
        self.lr = lr


@dataclass(frozen=True)
class TrainingConfig:
    gamma: float = 1.0
    pos_weight: float | str = "auto"
    lr0: float = 1e-4
    plateau_factor: float = 0.7
    plateau_patience: int = 5
    early_stop_patience: int = 15
    max_epochs: int = 70
    dropout: float = 0.2
    batch_size: int = 16
    seed: int = 0
    improvement_eps: float = 1e-6
    prob_clamp: float = 1e-7
    min_lr: float = 1e-6
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self) -> None:
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if isinstance(self.pos_weight, str):
            if self.pos_weight != "auto":
                raise ValueError("pos_weight must be a positive number or 'auto'")
        elif self.pos_weight <= 0:
            raise ValueError(f"pos_weight must be > 0, got {self.pos_weight}")

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainingConfig":
        d = json.loads(Path(path).read_text())
        aug = d.pop("augmentation", None)
        if aug is not None:
            aug["blur_kernels"] = tuple(aug.get("blur_kernels", (3, 5, 7)))
            d["augmentation"] = AugmentationSpec(**aug)
        return cls(**d)


def config_hash(config: TrainingConfig) -> str:
    canon = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def binary_focal_loss(
    p,
    y,
    gamma: float = 1.0,
    pos_weight: float = 1.0,
    clamp: float = 1e-7,
) -> float:
    """Mean focal loss over predicted probabilities.

    Positive samples contribute pos_weight * (1-p)^gamma * -ln(p); negative
    samples contribute p^gamma * -ln(1-p).  At gamma=0 and unit weight this
    is exactly binary cross-entropy.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), clamp, 1.0 - clamp)
    y = np.asarray(y, dtype=np.float64)
    per_sample = np.where(
        y > 0.5,
        pos_weight * (1.0 - p) ** gamma * (-np.log(p)),
        p**gamma * (-np.log(1.0 - p)),
    )
    return float(per_sample.mean())


def focal_loss_from_logits(
    logits: torch.Tensor,
    targets: torch.Tensor,
    gamma: float,
    pos_weight: float,
    clamp: float = 1e-7,
) -> torch.Tensor:
    p = torch.clamp(torch.sigmoid(logits), clamp, 1.0 - clamp)
    pos = pos_weight * (1.0 - p) ** gamma * (-torch.log(p))
    neg = p**gamma * (-torch.log(1.0 - p))
    return torch.where(targets > 0.5, pos, neg).mean()


def auto_pos_weight(train_index: DatasetIndex | Sequence[int]) -> float:
    """Class weight n_negative / n_positive over the training split."""
    if isinstance(train_index, DatasetIndex):
        counts = train_index.label_counts
        n_pos = counts.get(ViaLabel.VIA_POSITIVE, 0)
        n_neg = counts.get(ViaLabel.VIA_NEGATIVE, 0)
    else:
        arr = np.asarray(train_index)
        n_pos = int((arr == 1).sum())
        n_neg = int((arr == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(
            f"both classes required to derive a class weight (pos={n_pos}, neg={n_neg})"
        )
    return n_neg / n_pos


class PlateauScheduler:
    """Cuts the learning rate by a fixed factor when the monitored training
    loss stalls for more than `patience` epochs; bounded below by min_lr."""

    def __init__(self, lr: float, factor: float = 0.7, patience: int = 5,
                 eps: float = 1e-6, min_lr: float = 1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.eps = eps
        self.min_lr = min_lr
        self.best = math.inf
        self.stalled = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.eps:
            self.best = loss
            self.stalled = 0
        else:
            self.stalled += 1
            if self.stalled > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stalled = 0
        return self.lr


class Decision(enum.Enum):
    CONTINUE = "CONTINUE"
    STOP = "STOP"


class EarlyStopper:
    """Stops training when validation loss has not improved for more than
    `patience` epochs; reports improvements so best weights get snapshotted."""

    def __init__(self, patience: int = 15, eps: float = 1e-6):
        self.patience = patience
        self.eps = eps
        self.best = math.inf
        self.stalled = 0

    def step(self, loss: float) -> tuple[Decision, bool]:
        if loss < self.best - self.eps:
            self.best = loss
            self.stalled = 0
            return Decision.CONTINUE, True
        self.stalled += 1
        if self.stalled > self.patience:
            return Decision.STOP, False
        return Decision.CONTINUE, False


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainingState:
    epoch: int = 0
    current_lr: float = 0.0
    best_train_loss: float = math.inf
    epochs_since_train_improve: int = 0
    best_val_loss: float = math.inf
    epochs_since_val_improve: int = 0
    best_epoch: int = 0
    best_weights: dict | None = None
    history: list[EpochStats] = field(default_factory=list)


@dataclass
class TrainingData:
    """UNIT-domain image stacks plus labels (1 = positive) and record ids.

    Record ids feed the per-sample augmentation seeds, so identical data and
    seeds reproduce identical training runs on one machine.
    """

    train_images: np.ndarray
    train_labels: np.ndarray
    train_ids: list[str]
    val_images: np.ndarray
    val_labels: np.ndarray
    val_ids: list[str]


def assemble_split(
    index: DatasetIndex,
    assignment: SplitAssignment,
    split: Split,
    input_size: int = 224,
    detector: DetectorBackend | None = None,
    score_threshold: float = 0.3,
    loader: Callable = load_unit,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Load a split as stacked fixed-size crops (detector optional)."""
    wanted = set(assignment.record_ids(split))
    images, labels, ids = [], [], []
    for rec in index.records:
        if rec.record_id not in wanted:
            continue
        img = loader(rec.image_ref)
        if detector is not None:
            dets = detector.detect(img)
            box, _ = select_roi(dets, (img.height, img.width), score_threshold)
        else:
            box = full_image_box((img.height, img.width))
        crop = crop_and_resize(img, box, target=input_size)
        images.append(crop.data)
        labels.append(1 if rec.label is ViaLabel.VIA_POSITIVE else 0)
        ids.append(rec.record_id)
    if not images:
        return np.zeros((0, input_size, input_size, 3), np.float32), np.zeros(0, np.int64), []
    return np.stack(images), np.asarray(labels, np.int64), ids


@dataclass
class TrainResult:
    model: ModelHandle
    history: list[EpochStats]
    state: TrainingState
    stats: ChannelStats
    pos_weight: float


def _epoch_eval(
    module: torch.nn.Module,
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int,
    gamma: float,
    pos_weight: float,
    clamp: float,
) -> tuple[float, float]:
    module.eval()
    n = len(images)
    total_loss = 0.0
    correct = 0
    with torch.no_grad():
        for start in range(0, n, batch_size):
            chunk = slice(start, min(start + batch_size, n))
            x = torch.from_numpy(images[chunk]).permute(0, 3, 1, 2).contiguous()
            y = torch.from_numpy(labels[chunk].astype(np.float32))
            logits = module(x)
            loss = focal_loss_from_logits(logits, y, gamma, pos_weight, clamp)
            total_loss += float(loss) * (chunk.stop - chunk.start)
            preds = (torch.sigmoid(logits) >= 0.5).long()
            correct += int((preds == y.long()).sum())
    return total_loss / n, correct / n


def train(config: TrainingConfig, handle: ModelHandle, data: TrainingData) -> TrainResult:
    """Run the full recipe and return the model restored to its best
    validation-loss weights, plus the per-epoch history."""
    if len(data.train_images) == 0 or len(data.val_images) == 0:
        raise ValueError("train and validation splits must be non-empty")

    torch.manual_seed(derive_seed(config.seed, "torch"))
    module = handle.module
    module.head.drop.p = config.dropout
    set_mode(handle, Mode.TRAIN)

    stats = compute_channel_stats(
        (unit_raster(img) for img in data.train_images), computed_over="train"
    )
    mean = np.asarray(stats.mean, np.float32)
    std = np.asarray(stats.std, np.float32)
    norm_train = (data.train_images - mean) / std
    norm_val = (data.val_images - mean) / std

    if config.pos_weight == "auto":
        pos_weight = auto_pos_weight(data.train_labels)
    else:
        pos_weight = float(config.pos_weight)

    optimizer = torch.optim.Adam(module.parameters(), lr=config.lr0)
    plateau = PlateauScheduler(
        config.lr0,
        factor=config.plateau_factor,
        patience=config.plateau_patience,
        eps=config.improvement_eps,
        min_lr=config.min_lr,
    )
    stopper = EarlyStopper(config.early_stop_patience, eps=config.improvement_eps)
    state = TrainingState(current_lr=config.lr0)

    n = len(norm_train)
    for epoch in range(1, config.max_epochs + 1):
        lr = plateau.lr
        for group in optimizer.param_groups:
            group["lr"] = lr

        order = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch)).permutation(n)
        module.train()
        total_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = np.stack(
                [
                    augment(
                        normalized_raster(norm_train[i]),
                        config.augmentation,
                        derive_seed(config.seed, data.train_ids[i], epoch),
                    ).data
                    for i in idx
                ]
            )
            x = torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()
            y = torch.from_numpy(data.train_labels[idx].astype(np.float32))
            logits = module(x)
            loss = focal_loss_from_logits(logits, y, config.gamma, pos_weight,
                                          config.prob_clamp)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += float(loss.detach()) * len(idx)
            preds = (torch.sigmoid(logits.detach()) >= 0.5).long()
            correct += int((preds == y.long()).sum())

        train_loss = total_loss / n
        train_acc = correct / n
        if not math.isfinite(train_loss):
            raise TrainingAbortedError("training loss is not finite", epoch, lr)

        val_loss, val_acc = _epoch_eval(
            module,
            norm_val,
            data.val_labels,
            config.batch_size,
            config.gamma,
            pos_weight,
            config.prob_clamp,
        )
        if not math.isfinite(val_loss):
            raise TrainingAbortedError("validation loss is not finite", epoch, lr)

        state.history.append(EpochStats(epoch, lr, train_loss, val_loss, train_acc, val_acc))
        state.epoch = epoch
        state.current_lr = lr

        decision, improved = stopper.step(val_loss)
        if improved:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            state.best_weights = {
                k: v.detach().clone() for k, v in module.state_dict().items()
            }
        state.epochs_since_val_improve = stopper.stalled

        plateau.step(train_loss)
        state.best_train_loss = plateau.best
        state.epochs_since_train_improve = plateau.stalled

        if decision is Decision.STOP:
            break

    if state.best_weights is not None:
        module.load_state_dict(state.best_weights)
    set_mode(handle, Mode.EVAL)
    return TrainResult(
        model=handle,
        history=state.history,
        state=state,
        stats=stats,
        pos_weight=pos_weight,
    )


@dataclass
class RunMetrics:
    run_index: int
    seed: int
    val_loss: float
    val_accuracy: float
    val_sensitivity: float | None
    val_specificity: float | None
    epochs_trained: int


@dataclass
class MultiRunResult:
    runs: list[RunMetrics]
    averages: dict[str, float]
    best_run_index: int
    best: TrainResult


def multi_run(
    config: TrainingConfig,
    spec: BackboneSpec,
    data: TrainingData,
    n_runs: int = 10,
) -> MultiRunResult:
    """Repeat the recipe with per-run seeds; report the run metrics triple
    (accuracy, sensitivity, specificity) on validation, their averages, and
    the best run by lowest validation loss (ties: higher accuracy)."""
    from .evaluation import confusion, metrics, predict

    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    runs: list[RunMetrics] = []
    results: list[TrainResult] = []
    for i in range(n_runs):
        run_seed = derive_seed(config.seed, "run", i)
        run_config = replace(config, seed=run_seed)
        handle = build_model(spec, seed=derive_seed(run_seed, "init"))
        result = train(run_config, handle, data)
        preds, _, _ = predict(result.model, data.val_images, result.stats,
                              batch_size=config.batch_size)
        cm = confusion(preds, [int(v) for v in data.val_labels])
        report = metrics(cm)
        runs.append(
            RunMetrics(
                run_index=i,
                seed=run_seed,
                val_loss=result.state.best_val_loss,
                val_accuracy=report["accuracy"],
                val_sensitivity=report["sensitivity"],
                val_specificity=report["specificity"],
                epochs_trained=result.state.epoch,
            )
        )
        results.append(result)

    def _mean(values: list[float | None]) -> float:
        present = [v for v in values if v is not None]
        return float(np.mean(present)) if present else float("nan")

    averages = {
        "val_loss": _mean([r.val_loss for r in runs]),
        "accuracy": _mean([r.val_accuracy for r in runs]),
        "sensitivity": _mean([r.val_sensitivity for r in runs]),
        "specificity": _mean([r.val_specificity for r in runs]),
    }
    best_idx = min(
        range(n_runs), key=lambda i: (runs[i].val_loss, -runs[i].val_accuracy)
    )
    return MultiRunResult(
        runs=runs,
        averages=averages,
        best_run_index=best_idx,
        best=results[best_idx],
    )


def history_to_csv(history: list[EpochStats], path: str | Path) -> None:
    import csv

    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss", "train_acc", "val_acc"])
        for row in history:
            writer.writerow(
                [row.epoch, f"{row.lr:.8g}", f"{row.train_loss:.6f}",
                 f"{row.val_loss:.6f}", f"{row.train_acc:.6f}", f"{row.val_acc:.6f}"]
            )


def history_from_csv(path: str | Path) -> list[EpochStats]:
    import csv

    rows = []
    with Path(path).open(newline="") as f:
        for raw in csv.DictReader(f):
            rows.append(
                EpochStats(
                    epoch=int(raw["epoch"]),
                    lr=float(raw["lr"]),
                    train_loss=float(raw["train_loss"]),
                    val_loss=float(raw["val_loss"]),
                    train_acc=float(raw["train_acc"]),
                    val_acc=float(raw["val_acc"]),
                )
            )
    return rows
