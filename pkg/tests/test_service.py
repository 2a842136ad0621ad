from __future__ import annotations

import io
import socket

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from cervia import registry, synth
from cervia.model import BackboneSpec, BottleneckSpec, build_model
from cervia.service import ServiceState, create_app, load_service_state
from cervia.store import RecordStore, verify_archive


def service_spec():
    return BackboneSpec(
        input_size=32,
        stem_channels=8,
        stem_stride=2,
        groups=(BottleneckSpec(1, 8, 1, 1), BottleneckSpec(6, 16, 1, 2)),
        dropout=0.2,
    )


@pytest.fixture(scope="module")
def classifier_artifact(tmp_path_factory):
    path = tmp_path_factory.mktemp("artifacts") / "classifier.cvm"
    handle = build_model(service_spec(), seed=21)
    registry.export(
        handle,
        path,
        channel_stats={
            "mean": [0.35, 0.25, 0.25],
            "std": [0.3, 0.25, 0.25],
            "computed_over": "train",
            "record_count": 10,
        },
    )
    return path


@pytest.fixture()
def client(classifier_artifact, tmp_path):
    state = load_service_state(classifier_artifact, "stub", tmp_path / "store")
    app = create_app(state)
    return TestClient(app), state


def sample_image_bytes(seed=0, positive=True, size=64) -> bytes:
    rng = np.random.default_rng(seed)
    sample = synth.synth_cervigram(rng, positive=positive, size=size)
    buf = io.BytesIO()
    Image.fromarray(sample.image).save(buf, format="PNG")
    return buf.getvalue()


def post_case(client, mode="NOVICE", seed=0, patient="pt-001", key=None):
    data = {"mode": mode, "patient_ref": patient, "operator_id": "op-1"}
    if key is not None:
        data["idempotency_key"] = key
    return client.post(
        "/api/cases",
        files={"image": ("upload.png", sample_image_bytes(seed), "image/png")},
        data=data,
    )


def walk_keys(obj):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield k
            yield from walk_keys(v)
    elif isinstance(obj, list):
        for item in obj:
            yield from walk_keys(item)


class TestNoviceFlow:
    def test_result_returned_immediately(self, client):
        http, _ = client
        resp = post_case(http)
        assert resp.status_code == 201
        body = resp.json()
        assert body["mode"] == "NOVICE"
        assert body["status"] == "COMPLETE"
        ai = body["ai_result"]
        assert ai["label"] in ("VIA_POSITIVE", "VIA_NEGATIVE")
        assert 0.0 <= ai["probability"] <= 1.0
        assert ai["gradcam_url"].endswith("/gradcam")
        cam = http.get(ai["gradcam_url"])
        assert cam.status_code == 200
        assert cam.headers["content-type"] == "image/png"

    def test_idempotent_resubmission(self, client):
        http, _ = client
        first = post_case(http, key="idem-1")
        second = post_case(http, key="idem-1")
        assert first.status_code == 201
        assert second.status_code == 200
        assert first.json()["case_id"] == second.json()["case_id"]

    def test_case_image_served_back(self, client):
        http, _ = client
        case_id = post_case(http, seed=41).json()["case_id"]
        resp = http.get(f"/api/cases/{case_id}/image")
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        assert resp.content[:8] == b"\x89PNG\r\n\x1a\n"


class TestExpertGating:
    def test_creation_response_carries_no_result(self, client):
        http, _ = client
        resp = post_case(http, mode="EXPERT")
        body = resp.json()
        assert body["status"] == "AWAITING_EXPERT"
        keys = set(walk_keys(body))
        assert "ai_result" not in keys
        assert "probability" not in keys
        assert "agreement" not in keys

    def test_every_read_surface_hides_pending_result(self, client):
        http, _ = client
        case_id = post_case(http, mode="EXPERT").json()["case_id"]
        for payload in (
            http.get(f"/api/cases/{case_id}").json(),
            http.get("/api/cases").json(),
            http.get("/api/cases", params={"status": "AWAITING_EXPERT"}).json(),
        ):
            keys = set(walk_keys(payload))
            assert "ai_result" not in keys
            assert "probability" not in keys
        assert http.get(f"/api/cases/{case_id}/gradcam").status_code == 409

    def test_diagnosis_reveals_result_and_agreement(self, client):
        http, _ = client
        case_id = post_case(http, mode="EXPERT", seed=3).json()["case_id"]
        resp = http.post(
            f"/api/cases/{case_id}/expert-diagnosis",
            json={"diagnosis": "VIA_POSITIVE"},
        )
        assert resp.status_code == 200
        body = resp.json()
        assert body["status"] == "COMPLETE"
        assert "ai_result" in body
        assert body["agreement"] == (body["ai_result"]["label"] == "VIA_POSITIVE")
        assert http.get(f"/api/cases/{case_id}/gradcam").status_code == 200

    def test_second_diagnosis_conflicts(self, client):
        http, _ = client
        case_id = post_case(http, mode="EXPERT", seed=4).json()["case_id"]
        http.post(f"/api/cases/{case_id}/expert-diagnosis",
                  json={"diagnosis": "VIA_NEGATIVE"})
        resp = http.post(f"/api/cases/{case_id}/expert-diagnosis",
                         json={"diagnosis": "VIA_POSITIVE"})
        assert resp.status_code == 409
        body = http.get(f"/api/cases/{case_id}").json()
        assert body["expert_diagnosis"]["label"] == "VIA_NEGATIVE"

    def test_diagnosis_on_novice_case_invalid(self, client):
        http, _ = client
        case_id = post_case(http, mode="NOVICE", seed=5).json()["case_id"]
        resp = http.post(f"/api/cases/{case_id}/expert-diagnosis",
                         json={"diagnosis": "VIA_POSITIVE"})
        assert resp.status_code == 400

    def test_unknown_case_404(self, client):
        http, _ = client
        assert http.get("/api/cases/ghost").status_code == 404
        resp = http.post("/api/cases/ghost/expert-diagnosis",
                         json={"diagnosis": "VIA_POSITIVE"})
        assert resp.status_code == 404


class TestValidation:
    def test_undecodable_image(self, client):
        http, _ = client
        resp = http.post(
            "/api/cases",
            files={"image": ("junk.png", b"not an image", "image/png")},
            data={"mode": "NOVICE", "patient_ref": "p", "operator_id": "o"},
        )
        assert resp.status_code == 422

    def test_unknown_mode(self, client):
        http, _ = client
        resp = http.post(
            "/api/cases",
            files={"image": ("a.png", sample_image_bytes(), "image/png")},
            data={"mode": "WIZARD", "patient_ref": "p", "operator_id": "o"},
        )
        assert resp.status_code == 422

    def test_unloaded_model_yields_503(self, tmp_path):
        state = ServiceState(model=None, stats=None, detector=None,
                             store=RecordStore(tmp_path / "store"))
        http = TestClient(create_app(state))
        resp = http.post(
            "/api/cases",
            files={"image": ("a.png", sample_image_bytes(), "image/png")},
            data={"mode": "NOVICE", "patient_ref": "p", "operator_id": "o"},
        )
        assert resp.status_code == 503


class TestListingAndExport:
    def test_list_cases_newest_first_per_patient(self, client):
        http, _ = client
        ids = [post_case(http, seed=s, patient="pt-XYZ").json()["case_id"]
               for s in (7, 8, 9)]
        body = http.get("/api/cases", params={"patient_ref": "pt-XYZ"}).json()
        assert [c["case_id"] for c in body["cases"]] == list(reversed(ids))

    def test_status_filter(self, client):
        http, _ = client
        post_case(http, mode="EXPERT", seed=11, patient="pt-F")
        body = http.get(
            "/api/cases", params={"status": "COMPLETE", "patient_ref": "pt-F"}
        ).json()
        assert body["cases"] == []

    def test_export_archive_verifies(self, client, tmp_path):
        http, state = client
        post_case(http, seed=13, patient="pt-EXP")
        post_case(http, mode="EXPERT", seed=14, patient="pt-EXP")
        out = tmp_path / "wired-transfer.zip"
        resp = http.post("/api/export", json={"out_path": str(out),
                                              "patient_ref": "pt-EXP"})
        assert resp.status_code == 200
        manifest = resp.json()["manifest"]
        assert manifest["case_count"] == 2
        assert verify_archive(out) == manifest

    def test_export_import_roundtrip_checksums(self, client, tmp_path):
        http, state = client
        post_case(http, seed=15, patient="pt-RT")
        out = tmp_path / "rt.zip"
        manifest = http.post(
            "/api/export", json={"out_path": str(out), "patient_ref": "pt-RT"}
        ).json()["manifest"]
        fresh = RecordStore(tmp_path / "fresh")
        assert fresh.import_archive(out) == 1
        again = tmp_path / "rt2.zip"
        manifest_b = fresh.export_archive(again)
        assert manifest["files"] == manifest_b["files"]


class TestOfflinePosture:
    def test_full_workflow_makes_no_outbound_connections(self, classifier_artifact,
                                                          tmp_path, monkeypatch):
        attempts: list = []
        original = socket.socket.connect

        def watching_connect(self, address, *args, **kwargs):
            attempts.append(address)
            return original(self, address, *args, **kwargs)

        monkeypatch.setattr(socket.socket, "connect", watching_connect)

        state = load_service_state(classifier_artifact, "stub", tmp_path / "store")
        http = TestClient(create_app(state))
        case_id = post_case(http, mode="EXPERT", seed=20).json()["case_id"]
        http.get("/api/cases")
        http.post(f"/api/cases/{case_id}/expert-diagnosis",
                  json={"diagnosis": "VIA_NEGATIVE"})
        http.get(f"/api/cases/{case_id}/gradcam")
        http.post("/api/export", json={"out_path": str(tmp_path / "a.zip")})
        assert attempts == []


class TestPersistenceAcrossRestart:
    def test_cases_survive_service_restart(self, classifier_artifact, tmp_path):
        store_dir = tmp_path / "store"
        state = load_service_state(classifier_artifact, "stub", store_dir)
        http = TestClient(create_app(state))
        case_id = post_case(http, mode="EXPERT", seed=30).json()["case_id"]

        state2 = load_service_state(classifier_artifact, "stub", store_dir)
        http2 = TestClient(create_app(state2))
        body = http2.get(f"/api/cases/{case_id}").json()
        assert body["status"] == "AWAITING_EXPERT"
        assert "ai_result" not in set(walk_keys(body))
