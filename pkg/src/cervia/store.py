"""Append-only, on-disk repository of screening cases.

The store is a JSONL event log plus content-addressed blobs.  Replaying the
log reconstructs the exact store state; the API layer never deletes.  The
single serialization choke point, ``case_view``, is where expert-mode
gating is enforced: a pending expert case's AI result is simply never
rendered into any outgoing representation.
"""
from __future__ import annotations

import enum
import hashlib
import json
import threading
import zipfile
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

from .dataset import ViaLabel


class CaseMode(str, enum.Enum):
    NOVICE = "NOVICE"
    EXPERT = "EXPERT"


class CaseStatus(str, enum.Enum):
    AWAITING_EXPERT = "AWAITING_EXPERT"
    COMPLETE = "COMPLETE"


class StoreError(RuntimeError):
    pass


class CaseNotFound(StoreError):
    pass


class DiagnosisConflict(StoreError):
    """The case already carries an expert diagnosis; diagnoses are immutable."""


class InvalidCaseMode(StoreError):
    pass


@dataclass(frozen=True)
class AiResult:
    label: ViaLabel
    probability: float
    gradcam_blob: str | None
    roi_provenance: str

    def as_dict(self) -> dict:
        return {
            "label": self.label.value,
            "probability": round(self.probability, 6),
            "gradcam_blob": self.gradcam_blob,
            "roi_provenance": self.roi_provenance,
        }


@dataclass(frozen=True)
class ExpertDiagnosis:
    label: ViaLabel
    entered_at: str

    def as_dict(self) -> dict:
        return {"label": self.label.value, "entered_at": self.entered_at}


@dataclass(frozen=True)
class ScreeningCase:
    case_id: str
    patient_ref: str
    operator_id: str
    mode: CaseMode
    image_blob: str
    status: CaseStatus
    created_at: str
    ai_result: AiResult | None = None
    expert_diagnosis: ExpertDiagnosis | None = None
    idempotency_key: str | None = None


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def case_view(case: ScreeningCase) -> dict:
    """The one public serialization of a case.

    A pending expert case's ai_result never appears in the output, under any
    key; once the expert diagnosis is recorded the result is revealed along
    with an agreement flag.
    """
    view = {
        "case_id": case.case_id,
        "patient_ref": case.patient_ref,
        "operator_id": case.operator_id,
        "mode": case.mode.value,
        "status": case.status.value,
        "created_at": case.created_at,
        "image_blob": case.image_blob,
    }
    if case.expert_diagnosis is not None:
        view["expert_diagnosis"] = case.expert_diagnosis.as_dict()
    withheld = case.mode is CaseMode.EXPERT and case.status is CaseStatus.AWAITING_EXPERT
    if case.ai_result is not None and not withheld:
        view["ai_result"] = case.ai_result.as_dict()
        if case.expert_diagnosis is not None:
            view["agreement"] = case.expert_diagnosis.label is case.ai_result.label
    return view


def _case_to_record(case: ScreeningCase) -> dict:
    rec = {
        "case_id": case.case_id,
        "patient_ref": case.patient_ref,
        "operator_id": case.operator_id,
        "mode": case.mode.value,
        "status": case.status.value,
        "created_at": case.created_at,
        "image_blob": case.image_blob,
        "idempotency_key": case.idempotency_key,
        "ai_result": case.ai_result.as_dict() if case.ai_result else None,
        "expert_diagnosis": (
            case.expert_diagnosis.as_dict() if case.expert_diagnosis else None
        ),
    }
    return rec


def _case_from_record(rec: dict) -> ScreeningCase:
    ai = rec.get("ai_result")
    diag = rec.get("expert_diagnosis")
    return ScreeningCase(
        case_id=rec["case_id"],
        patient_ref=rec["patient_ref"],
        operator_id=rec["operator_id"],
        mode=CaseMode(rec["mode"]),
        status=CaseStatus(rec["status"]),
        created_at=rec["created_at"],
        image_blob=rec["image_blob"],
        idempotency_key=rec.get("idempotency_key"),
        ai_result=(
            AiResult(
                label=ViaLabel(ai["label"]),
                probability=ai["probability"],
                gradcam_blob=ai.get("gradcam_blob"),
                roi_provenance=ai.get("roi_provenance", "FULL_IMAGE"),
            )
            if ai
            else None
        ),
        expert_diagnosis=(
            ExpertDiagnosis(label=ViaLabel(diag["label"]), entered_at=diag["entered_at"])
            if diag
            else None
        ),
    )


class RecordStore:
    """JSONL event log + content-addressed blob directory, single writer."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.blob_dir = self.root / "blobs"
        self.log_path = self.root / "log.jsonl"
        self.root.mkdir(parents=True, exist_ok=True)
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._cases: dict[str, ScreeningCase] = {}
        self._by_idempotency: dict[str, str] = {}
        self._replay()

    def _replay(self) -> None:
        if not self.log_path.is_file():
            return
        with self.log_path.open() as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                self._apply(event)

    def _apply(self, event: dict) -> None:
        kind = event["event"]
        if kind == "case_created":
            case = _case_from_record(event["case"])
            self._cases[case.case_id] = case
            if case.idempotency_key:
                self._by_idempotency[case.idempotency_key] = case.case_id
        elif kind == "expert_diagnosis":
            case = self._cases[event["case_id"]]
            self._cases[case.case_id] = replace(
                case,
                expert_diagnosis=ExpertDiagnosis(
                    label=ViaLabel(event["label"]), entered_at=event["entered_at"]
                ),
                status=CaseStatus.COMPLETE,
            )
        else:
            raise StoreError(f"unknown event kind {kind!r} in log")

    def _append(self, event: dict) -> None:
        with self.log_path.open("a") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")

    # --- blobs ---------------------------------------------------------

    def put_blob(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self.blob_dir / digest
        if not path.exists():
            path.write_bytes(data)
        return digest

    def get_blob(self, blob_id: str) -> bytes:
        path = self.blob_dir / blob_id
        if not path.is_file():
            raise StoreError(f"blob {blob_id} not found")
        return path.read_bytes()

    # --- cases ---------------------------------------------------------

    def find_by_idempotency(self, key: str) -> ScreeningCase | None:
        case_id = self._by_idempotency.get(key)
        return self._cases.get(case_id) if case_id else None

    def add_case(self, case: ScreeningCase) -> ScreeningCase:
        with self._lock:
            if case.idempotency_key:
                existing = self.find_by_idempotency(case.idempotency_key)
                if existing is not None:
                    return existing
            if case.case_id in self._cases:
                raise StoreError(f"case {case.case_id} already exists")
            event = {"event": "case_created", "case": _case_to_record(case)}
            self._append(event)
            self._apply(event)
            return case

    def get_case(self, case_id: str) -> ScreeningCase:
        case = self._cases.get(case_id)
        if case is None:
            raise CaseNotFound(f"case {case_id} not found")
        return case

    def record_diagnosis(self, case_id: str, label: ViaLabel) -> ScreeningCase:
        with self._lock:
            case = self.get_case(case_id)
            if case.mode is not CaseMode.EXPERT:
                raise InvalidCaseMode(
                    f"case {case_id} is a {case.mode.value} case; diagnoses apply to "
                    "expert cases only"
                )
            if case.expert_diagnosis is not None:
                raise DiagnosisConflict(f"case {case_id} already has a diagnosis")
            event = {
                "event": "expert_diagnosis",
                "case_id": case_id,
                "label": label.value,
                "entered_at": utc_now(),
            }
            self._append(event)
            self._apply(event)
            return self.get_case(case_id)

    def list_cases(
        self,
        patient_ref: str | None = None,
        status: CaseStatus | None = None,
        label: ViaLabel | None = None,
        since: str | None = None,
        until: str | None = None,
    ) -> list[ScreeningCase]:
        """Filtered cases, newest first.  The label filter matches the expert
        diagnosis when present, else a *revealed* AI label; it never peeks at
        withheld results."""
        out = []
        for case in self._cases.values():
            if patient_ref is not None and case.patient_ref != patient_ref:
                continue
            if status is not None and case.status is not status:
                continue
            if since is not None and case.created_at < since:
                continue
            if until is not None and case.created_at > until:
                continue
            if label is not None:
                visible = case_view(case)
                got = None
                if "expert_diagnosis" in visible:
                    got = visible["expert_diagnosis"]["label"]
                elif "ai_result" in visible:
                    got = visible["ai_result"]["label"]
                if got != label.value:
                    continue
            out.append(case)
        out.sort(key=lambda c: (c.created_at, c.case_id), reverse=True)
        return out

    def all_cases(self) -> list[ScreeningCase]:
        return self.list_cases()

    # --- archive -------------------------------------------------------

    def export_archive(self, path: str | Path, cases: list[ScreeningCase] | None = None) -> dict:
        """Deterministic zip of gated case views plus their blobs.

        Entries are stored uncompressed with fixed timestamps and sorted
        names, so identical store content yields byte-identical archives.
        The manifest carries a sha256 per entry.
        """
        if cases is None:
            cases = self.all_cases()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        entries: dict[str, bytes] = {}
        for case in cases:
            view = case_view(case)
            entries[f"cases/{case.case_id}.json"] = json.dumps(
                view, sort_keys=True, indent=2
            ).encode()
            blob_ids = [case.image_blob]
            if "ai_result" in view and view["ai_result"].get("gradcam_blob"):
                blob_ids.append(view["ai_result"]["gradcam_blob"])
            for blob_id in blob_ids:
                entries[f"blobs/{blob_id}"] = self.get_blob(blob_id)

        manifest = {
            "format": "cervia-archive/1",
            "case_count": len(cases),
            "files": [
                {"name": name, "sha256": hashlib.sha256(data).hexdigest()}
                for name, data in sorted(entries.items())
            ],
        }
        manifest_bytes = json.dumps(manifest, sort_keys=True, indent=2).encode()

        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in sorted(entries):
                info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
                zf.writestr(info, entries[name])
            info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, manifest_bytes)
        return manifest

    def import_archive(self, path: str | Path) -> int:
        """Load archived cases and blobs into this store; returns the number
        of cases imported.  Existing case ids are left untouched."""
        imported = 0
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            manifest = json.loads(zf.read("manifest.json"))
            for entry in manifest["files"]:
                data = zf.read(entry["name"])
                if hashlib.sha256(data).hexdigest() != entry["sha256"]:
                    raise StoreError(f"archive entry {entry['name']} fails its checksum")
            for name in names:
                if name.startswith("blobs/"):
                    self.put_blob(zf.read(name))
            for name in sorted(n for n in names if n.startswith("cases/")):
                view = json.loads(zf.read(name))
                if view["case_id"] in self._cases:
                    continue
                rec = {
                    "case_id": view["case_id"],
                    "patient_ref": view["patient_ref"],
                    "operator_id": view["operator_id"],
                    "mode": view["mode"],
                    "status": view["status"],
                    "created_at": view["created_at"],
                    "image_blob": view["image_blob"],
                    "idempotency_key": None,
                    "ai_result": view.get("ai_result"),
                    "expert_diagnosis": view.get("expert_diagnosis"),
                }
                self.add_case(_case_from_record(rec))
                imported += 1
        return imported


def verify_archive(path: str | Path) -> dict:
    """Check every manifest checksum of an archive; returns the manifest."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for entry in manifest["files"]:
            data = zf.read(entry["name"])
            if hashlib.sha256(data).hexdigest() != entry["sha256"]:
                raise StoreError(f"archive entry {entry['name']} fails its checksum")
    return manifest
