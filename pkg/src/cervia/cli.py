"""Command-line entry points for the screening toolkit."""
from __future__ import annotations

import json
from pathlib import Path

import click

from . import dataset as ds
from . import registry, synth
from .model import BackboneSpec, build_model, summary_rows
from .preprocess import channel_stats_for_split
from .raster import load_unit, save_unit
from .roi import load_detector, render_detections, select_roi, crop_and_resize
from .training import (
    TrainingConfig,
    assemble_split,
    config_hash,
    history_from_csv,
    history_to_csv,
    multi_run,
    train,
    TrainingData,
)


@click.group()
def main() -> None:
    """Offline VIA screening toolkit."""


# --- data ----------------------------------------------------------------


@main.group()
def data() -> None:
    """Dataset ingestion, balancing, and splits."""


@data.command("ingest")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--check-files/--no-check-files", default=True)
def data_ingest(manifest_path: str, out_path: str, check_files: bool) -> None:
    index = ds.ingest(manifest_path, check_files=check_files)
    index.to_json(out_path)
    counts = {k.value: v for k, v in index.label_counts.items()}
    click.echo(f"ingested {len(index.records)} records {counts} -> {out_path}")


@data.command("balance")
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--images-out", type=click.Path(), default=None)
def data_balance(index_path: str, out_path: str, images_out: str | None) -> None:
    index = ds.DatasetIndex.from_json(index_path)
    result = ds.balance_positives_by_transpose(index, out_dir=images_out)
    result.index.to_json(out_path)
    for failure in result.failures:
        click.echo(f"warning: {failure.record_id}: {failure.reason}", err=True)
    click.echo(
        f"balanced: {len(index.records)} -> {len(result.index.records)} records "
        f"({len(result.failures)} failures)"
    )


@data.command("split")
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--ratios", default="0.7,0.2,0.1", show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
def data_split(index_path: str, ratios: str, seed: int, out_path: str) -> None:
    index = ds.DatasetIndex.from_json(index_path)
    parts = tuple(float(x) for x in ratios.split(","))
    if len(parts) != 3:
        raise click.BadParameter("ratios must be three comma-separated numbers")
    assignment = ds.patient_aware_split(index, parts, seed)
    assignment.to_json(out_path)
    report = ds.split_report(assignment, index)
    click.echo(json.dumps(report.as_dict(), indent=2))


@data.command("report")
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--assignment", "assignment_path", required=True, type=click.Path(exists=True))
def data_report(index_path: str, assignment_path: str) -> None:
    index = ds.DatasetIndex.from_json(index_path)
    assignment = ds.SplitAssignment.from_json(assignment_path)
    report = ds.split_report(assignment, index)
    click.echo(json.dumps(report.as_dict(), indent=2))


@main.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--patients", default=50, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--size", default=224, show_default=True, type=int)
@click.option("--positive-rate", default=0.5, show_default=True, type=float)
def synth_cmd(out_dir: str, patients: int, seed: int, size: int, positive_rate: float) -> None:
    """Generate a synthetic, patient-grouped dataset with blob masks."""
    result = synth.generate_dataset(
        out_dir, n_patients=patients, seed=seed, size=size, positive_rate=positive_rate
    )
    click.echo(
        f"wrote {result.n_images} images ({result.n_positive} positive) under {out_dir}; "
        f"manifest: {result.manifest_path}"
    )


# --- preprocessing ---------------------------------------------------------


@main.command("stats")
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--assignment", "assignment_path", required=True, type=click.Path(exists=True))
@click.option("--split", default="train", show_default=True,
              type=click.Choice(["train", "val", "test"]))
@click.option("--out", "out_path", required=True, type=click.Path())
def stats_cmd(index_path: str, assignment_path: str, split: str, out_path: str) -> None:
    index = ds.DatasetIndex.from_json(index_path)
    assignment = ds.SplitAssignment.from_json(assignment_path)
    stats = channel_stats_for_split(index, assignment, ds.Split(split.upper()))
    stats.to_json(out_path)
    click.echo(f"mean={[round(m, 6) for m in stats.mean]} std={[round(s, 6) for s in stats.std]}")


# --- roi -------------------------------------------------------------------


@main.command("roi")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--backend", default="stub", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--viz", "viz_path", type=click.Path(), default=None)
@click.option("--threshold", default=0.3, show_default=True, type=float)
@click.option("--target", default=224, show_default=True, type=int)
def roi_cmd(image_path, backend, out_path, viz_path, threshold, target) -> None:
    img = load_unit(image_path)
    detector = load_detector(backend)
    detections = detector.detect(img)
    box, provenance = select_roi(detections, (img.height, img.width), threshold)
    crop = crop_and_resize(img, box, target=target)
    save_unit(crop, out_path)
    if viz_path:
        save_unit(render_detections(img, detections, box), viz_path)
    click.echo(f"{provenance.value}: box={tuple(round(v, 1) for v in box)} -> {out_path}")


# --- model -----------------------------------------------------------------


@main.group("model")
def model_group() -> None:
    """Model inspection."""


@model_group.command("summary")
@click.option("--spec", "spec_path", type=click.Path(exists=True), default=None,
              help="Backbone spec JSON; defaults to the published plan.")
def model_summary(spec_path: str | None) -> None:
    spec = BackboneSpec.from_json(spec_path) if spec_path else BackboneSpec.default()
    rows = summary_rows(spec)
    header = f"{'Input':>14}  {'Operator':<12} {'t':>3} {'c':>5} {'n':>3} {'s':>3}"
    click.echo(header)
    for row in rows:
        t = "-" if row["t"] is None else row["t"]
        c = "-" if row["c"] is None else row["c"]
        n = "-" if row["n"] is None else row["n"]
        s = "-" if row["s"] is None else row["s"]
        click.echo(f"{row['input']:>14}  {row['operator']:<12} {t:>3} {c:>5} {n:>3} {s:>3}")
    handle = build_model(spec)
    n_params = sum(p.numel() for p in handle.module.parameters() if p.requires_grad)
    click.echo(f"trainable parameters: {n_params}")


# --- training ----------------------------------------------------------------


def _load_training_data(index_path, assignment_path, input_size, backend) -> TrainingData:
    index = ds.DatasetIndex.from_json(index_path)
    assignment = ds.SplitAssignment.from_json(assignment_path)
    detector = load_detector(backend) if backend else None
    tr_im, tr_lab, tr_ids = assemble_split(index, assignment, ds.Split.TRAIN, input_size, detector)
    va_im, va_lab, va_ids = assemble_split(index, assignment, ds.Split.VAL, input_size, detector)
    return TrainingData(tr_im, tr_lab, tr_ids, va_im, va_lab, va_ids)


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--spec", "spec_path", type=click.Path(exists=True), default=None)
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--assignment", "assignment_path", required=True, type=click.Path(exists=True))
@click.option("--runs", default=1, show_default=True, type=int)
@click.option("--roi-backend", default=None, help="Detector ref; omit to train on full frames.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def train_cmd(config_path, spec_path, index_path, assignment_path, runs, roi_backend, out_dir) -> None:
    config = TrainingConfig.from_json(config_path) if config_path else TrainingConfig()
    spec = BackboneSpec.from_json(spec_path) if spec_path else BackboneSpec.default()
    data = _load_training_data(index_path, assignment_path, spec.input_size, roi_backend)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if runs == 1:
        handle = build_model(spec, seed=config.seed)
        result = train(config, handle, data)
        history_to_csv(result.history, out / "history.csv")
        artifact = registry.export(
            result.model,
            out / "model.cvm",
            training_config_hash=config_hash(config),
            metrics={"best_val_loss": result.state.best_val_loss},
            channel_stats=result.stats.as_dict(),
        )
        click.echo(
            f"trained {result.state.epoch} epochs; best val loss "
            f"{result.state.best_val_loss:.6f} (epoch {result.state.best_epoch}); "
            f"artifact {artifact.path} ({artifact.size_bytes / 1024:.0f} KB)"
        )
        return

    outcome = multi_run(config, spec, data, n_runs=runs)
    best = outcome.best
    history_to_csv(best.history, out / "history.csv")
    artifact = registry.export(
        best.model,
        out / "model.cvm",
        training_config_hash=config_hash(config),
        metrics=outcome.averages,
        channel_stats=best.stats.as_dict(),
    )
    summary = {
        "runs": [
            {
                "run": r.run_index,
                "val_loss": r.val_loss,
                "accuracy": r.val_accuracy,
                "sensitivity": r.val_sensitivity,
                "specificity": r.val_specificity,
                "epochs": r.epochs_trained,
            }
            for r in outcome.runs
        ],
        "averages": outcome.averages,
        "best_run": outcome.best_run_index,
    }
    (out / "runs.json").write_text(json.dumps(summary, indent=2))
    click.echo(json.dumps(summary["averages"], indent=2))
    click.echo(f"best run {outcome.best_run_index}; artifact {artifact.path}")


@main.command("plot-history")
@click.option("--history", "history_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def plot_history(history_path: str, out_path: str) -> None:
    """Loss/accuracy curves over epochs from a training history CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = history_from_csv(history_path)
    epochs = [r.epoch for r in rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [r.train_loss for r in rows], label="train_loss")
    ax_loss.plot(epochs, [r.val_loss for r in rows], label="val_loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.legend()
    ax_acc.plot(epochs, [r.train_acc for r in rows], label="train_accuracy")
    ax_acc.plot(epochs, [r.val_acc for r in rows], label="val_accuracy")
    ax_acc.set_xlabel("epoch")
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    click.echo(f"wrote {out_path}")


# --- evaluation --------------------------------------------------------------


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--assignment", "assignment_path", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "val", "test"]))
@click.option("--roi-backend", default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
def eval_cmd(model_path, index_path, assignment_path, split, roi_backend, out_path) -> None:
    from .evaluation import evaluate
    from .preprocess import ChannelStats

    handle = registry.load(model_path)
    header = registry.read_artifact_header(model_path)
    raw = header.get("channel_stats")
    if not raw:
        raise click.ClickException("artifact carries no channel statistics")
    stats = ChannelStats(
        mean=tuple(raw["mean"]), std=tuple(raw["std"]),
        computed_over=raw.get("computed_over", "train"),
        record_count=int(raw.get("record_count", 0)),
    )
    index = ds.DatasetIndex.from_json(index_path)
    assignment = ds.SplitAssignment.from_json(assignment_path)
    detector = load_detector(roi_backend) if roi_backend else None
    images, labels, ids = assemble_split(
        index, assignment, ds.Split(split.upper()), handle.spec.input_size, detector
    )
    report = evaluate(handle, images, labels, stats, split_tag=split, record_ids=ids)
    Path(out_path).write_text(json.dumps(report.as_dict(), indent=2))
    click.echo(
        f"accuracy={report.accuracy:.4f} sensitivity={report.sensitivity} "
        f"specificity={report.specificity} -> {out_path}"
    )


@main.command("gradcam")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--roi-backend", default=None)
def gradcam_cmd(model_path, image_path, out_path, roi_backend) -> None:
    from .evaluation import gradcam as compute_gradcam
    from .evaluation import overlay as blend_overlay
    from .preprocess import ChannelStats, normalize
    from .roi import full_image_box

    handle = registry.load(model_path)
    header = registry.read_artifact_header(model_path)
    raw = header.get("channel_stats")
    if not raw:
        raise click.ClickException("artifact carries no channel statistics")
    stats = ChannelStats(
        mean=tuple(raw["mean"]), std=tuple(raw["std"]),
        computed_over=raw.get("computed_over", "train"),
        record_count=int(raw.get("record_count", 0)),
    )
    img = load_unit(image_path)
    if roi_backend:
        detector = load_detector(roi_backend)
        box, _ = select_roi(detector.detect(img), (img.height, img.width))
    else:
        box = full_image_box((img.height, img.width))
    crop = crop_and_resize(img, box, target=handle.spec.input_size)
    cam = compute_gradcam(handle, normalize(crop, stats).data)
    save_unit(blend_overlay(crop, cam.upsampled), out_path)
    click.echo(f"wrote {out_path}")


# --- registry / service -------------------------------------------------------


@main.command("export")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True),
              help="Existing artifact (or run directory containing model.cvm).")
@click.option("--out", "out_path", required=True, type=click.Path())
def export_cmd(model_path: str, out_path: str) -> None:
    src = Path(model_path)
    if src.is_dir():
        src = src / "model.cvm"
    handle = registry.load(src)
    header = registry.read_artifact_header(src)
    artifact = registry.export(
        handle,
        out_path,
        training_config_hash=header.get("training_config_hash"),
        metrics=header.get("metrics"),
        channel_stats=header.get("channel_stats"),
    )
    click.echo(
        f"exported {artifact.path} ({artifact.size_bytes / 1024:.0f} KB), "
        f"sha256 {artifact.sha256[:16]}..."
    )


@main.command("serve")
@click.option("--classifier", envvar="CERVIA_CLASSIFIER", required=True,
              type=click.Path(exists=True))
@click.option("--detector", envvar="CERVIA_DETECTOR", default="stub", show_default=True)
@click.option("--store", "store_dir", envvar="CERVIA_STORE", default="./store",
              show_default=True, type=click.Path())
@click.option("--bind", envvar="CERVIA_BIND", default="127.0.0.1:8710", show_default=True)
@click.option("--ui", "ui_dir", envvar="CERVIA_UI", default=None, type=click.Path())
def serve_cmd(classifier, detector, store_dir, bind, ui_dir) -> None:
    """Run the screening station service (loopback by default)."""
    import uvicorn

    from .service import create_app, load_service_state

    host, _, port = bind.partition(":")
    state = load_service_state(classifier, detector, store_dir)
    app = create_app(state, ui_dir=ui_dir)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8710))


if __name__ == "__main__":
    main()
