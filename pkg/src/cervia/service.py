"""Local screening-station service.

Runs the whole inference pipeline (detect, crop, normalize, classify,
explain) on uploaded images and persists every case in the local record
store.  Novice-mode responses carry the AI verdict immediately; expert-mode
responses withhold it until the clinician's diagnosis has been recorded.
Everything happens on this machine: the service holds no outbound network
client and is meant to be bound to loopback.
"""
from __future__ import annotations

import io
import uuid
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, Form, HTTPException, UploadFile
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from .dataset import ViaLabel
from .evaluation import gradcam, overlay
from .model import ModelHandle, classify, forward
from .preprocess import ChannelStats, normalize
from .raster import Raster, decode_unit, to_uint8
from .registry import load as load_artifact
from .registry import read_artifact_header
from .roi import DetectorBackend, crop_and_resize, load_detector, select_roi
from .store import (
    CaseMode,
    CaseStatus,
    AiResult,
    DiagnosisConflict,
    InvalidCaseMode,
    CaseNotFound,
    RecordStore,
    ScreeningCase,
    case_view,
    utc_now,
)


@dataclass
class ServiceState:
    model: ModelHandle | None
    stats: ChannelStats | None
    detector: DetectorBackend | None
    store: RecordStore
    threshold: float = 0.5


def _png_bytes(img: Raster) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG")
    return buf.getvalue()


def load_service_state(
    classifier: str | Path | None,
    detector: str | Path | None,
    store_dir: str | Path,
    threshold: float = 0.5,
) -> ServiceState:
    model = None
    stats = None
    if classifier is not None:
        model = load_artifact(classifier)
        header = read_artifact_header(classifier)
        raw_stats = header.get("channel_stats")
        if raw_stats:
            stats = ChannelStats(
                mean=tuple(raw_stats["mean"]),
                std=tuple(raw_stats["std"]),
                computed_over=raw_stats.get("computed_over", "train"),
                record_count=int(raw_stats.get("record_count", 0)),
            )
    backend = load_detector(detector) if detector is not None else None
    return ServiceState(
        model=model,
        stats=stats,
        detector=backend,
        store=RecordStore(store_dir),
        threshold=threshold,
    )


class DiagnosisBody(BaseModel):
    diagnosis: str


class ExportBody(BaseModel):
    out_path: str | None = None
    patient_ref: str | None = None
    status: str | None = None


def render_case(case: ScreeningCase) -> dict:
    view = case_view(case)
    if "ai_result" in view and view["ai_result"].get("gradcam_blob"):
        view["ai_result"]["gradcam_url"] = f"/api/cases/{case.case_id}/gradcam"
    return view


def create_app(state: ServiceState, ui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="cervia screening service", docs_url=None, redoc_url=None)
    app.state.service = state

    def _require_model() -> tuple[ModelHandle, ChannelStats]:
        if state.model is None:
            raise HTTPException(status_code=503, detail="classifier artifact not loaded")
        if state.stats is None:
            raise HTTPException(
                status_code=503,
                detail="classifier artifact carries no channel statistics",
            )
        return state.model, state.stats

    @app.get("/api/health")
    def health() -> dict:
        return {
            "status": "ok",
            "model_loaded": state.model is not None,
            "detector": getattr(state.detector, "backend_id", None),
            "cases": len(state.store.all_cases()),
        }

    @app.post("/api/cases", status_code=201)
    async def create_case(
        image: UploadFile,
        mode: str = Form(...),
        patient_ref: str = Form(...),
        operator_id: str = Form(...),
        idempotency_key: str | None = Form(None),
    ) -> JSONResponse:
        model, stats = _require_model()
        try:
            case_mode = CaseMode(mode.upper())
        except ValueError:
            raise HTTPException(status_code=422, detail=f"unknown mode {mode!r}")

        if idempotency_key:
            existing = state.store.find_by_idempotency(idempotency_key)
            if existing is not None:
                return JSONResponse(render_case(existing), status_code=200)

        raw = await image.read()
        try:
            img = decode_unit(raw)
        except Exception:
            raise HTTPException(status_code=422, detail="image could not be decoded")

        detections = state.detector.detect(img) if state.detector is not None else []
        box, provenance = select_roi(detections, (img.height, img.width))
        crop = crop_and_resize(img, box, target=model.spec.input_size)
        normalized = normalize(crop, stats)
        logit = float(forward(model, normalized.data[None])[0])
        label, probability = classify(logit, state.threshold)
        cam = gradcam(model, normalized.data)
        heat_overlay = overlay(crop, cam.upsampled)

        image_blob = state.store.put_blob(raw)
        gradcam_blob = state.store.put_blob(_png_bytes(heat_overlay))
        case = ScreeningCase(
            case_id=uuid.uuid4().hex,
            patient_ref=patient_ref,
            operator_id=operator_id,
            mode=case_mode,
            image_blob=image_blob,
            status=(
                CaseStatus.COMPLETE
                if case_mode is CaseMode.NOVICE
                else CaseStatus.AWAITING_EXPERT
            ),
            created_at=utc_now(),
            ai_result=AiResult(
                label=label,
                probability=probability,
                gradcam_blob=gradcam_blob,
                roi_provenance=provenance.value,
            ),
            idempotency_key=idempotency_key,
        )
        stored = state.store.add_case(case)
        return JSONResponse(render_case(stored), status_code=201)

    @app.post("/api/cases/{case_id}/expert-diagnosis")
    def submit_diagnosis(case_id: str, body: DiagnosisBody) -> dict:
        try:
            label = ViaLabel(body.diagnosis.upper())
        except ValueError:
            raise HTTPException(
                status_code=422, detail=f"unknown diagnosis {body.diagnosis!r}"
            )
        try:
            updated = state.store.record_diagnosis(case_id, label)
        except CaseNotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except DiagnosisConflict as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except InvalidCaseMode as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return render_case(updated)

    @app.get("/api/cases/{case_id}")
    def get_case(case_id: str) -> dict:
        try:
            case = state.store.get_case(case_id)
        except CaseNotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return render_case(case)

    @app.get("/api/cases")
    def list_cases(
        patient_ref: str | None = None,
        status: str | None = None,
        label: str | None = None,
        since: str | None = None,
        until: str | None = None,
    ) -> dict:
        status_f = None
        label_f = None
        if status is not None:
            try:
                status_f = CaseStatus(status.upper())
            except ValueError:
                raise HTTPException(status_code=422, detail=f"unknown status {status!r}")
        if label is not None:
            try:
                label_f = ViaLabel(label.upper())
            except ValueError:
                raise HTTPException(status_code=422, detail=f"unknown label {label!r}")
        cases = state.store.list_cases(
            patient_ref=patient_ref, status=status_f, label=label_f, since=since,
            until=until,
        )
        return {"cases": [render_case(c) for c in cases]}

    @app.get("/api/cases/{case_id}/gradcam")
    def get_gradcam(case_id: str) -> Response:
        try:
            case = state.store.get_case(case_id)
        except CaseNotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        view = case_view(case)
        blob_id = view.get("ai_result", {}).get("gradcam_blob")
        if blob_id is None:
            # absent or withheld pending expert diagnosis; same response either way
            raise HTTPException(status_code=409, detail="result not available")
        return Response(content=state.store.get_blob(blob_id), media_type="image/png")

    @app.get("/api/cases/{case_id}/image")
    def get_image(case_id: str) -> Response:
        try:
            case = state.store.get_case(case_id)
        except CaseNotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        data = state.store.get_blob(case.image_blob)
        media = "image/png" if data[:8] == b"\x89PNG\r\n\x1a\n" else "image/jpeg"
        return Response(content=data, media_type=media)

    @app.post("/api/export")
    def export_cases(body: ExportBody) -> dict:
        status_f = CaseStatus(body.status.upper()) if body.status else None
        cases = state.store.list_cases(patient_ref=body.patient_ref, status=status_f)
        out = (
            Path(body.out_path)
            if body.out_path
            else state.store.root / "exports" / f"archive-{utc_now().replace(':', '')}.zip"
        )
        manifest = state.store.export_archive(out, cases)
        return {"archive": str(out), "manifest": manifest}

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
