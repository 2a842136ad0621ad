from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cervia import dataset as ds
from cervia.raster import load_unit, to_uint8, transpose_uint8


def write_manifest(path: Path, rows: list[dict]) -> Path:
    lines = ["path,patient_id,source,label"]
    for r in rows:
        lines.append(f"{r['path']},{r['patient_id']},{r['source']},{r['label']}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_png(path: Path, arr: np.ndarray) -> Path:
    Image.fromarray(arr).save(path)
    return path


def make_image(tmp_path: Path, name: str, seed: int = 0, size: int = 12) -> Path:
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(size, size + 2, 3), dtype=np.uint8)
    return write_png(tmp_path / name, arr)


class TestIngest:
    def test_empty_manifest(self, tmp_path):
        manifest = write_manifest(tmp_path / "m.csv", [])
        index = ds.ingest(manifest)
        assert index.records == []
        assert sum(index.label_counts.values()) == 0
        assert sum(index.source_counts.values()) == 0

    def test_two_rows_same_patient(self, tmp_path):
        a = make_image(tmp_path, "a.png", 1)
        b = make_image(tmp_path, "b.png", 2)
        manifest = write_manifest(
            tmp_path / "m.csv",
            [
                {"path": a, "patient_id": "p1", "source": "KMC", "label": "VIA_POSITIVE"},
                {"path": b, "patient_id": "p1", "source": "KMC", "label": "VIA_NEGATIVE"},
            ],
        )
        index = ds.ingest(manifest)
        assert len(index.records) == 2
        assert index.records[0].patient_id == index.records[1].patient_id
        assert index.label_counts[ds.ViaLabel.VIA_POSITIVE] == 1
        assert index.label_counts[ds.ViaLabel.VIA_NEGATIVE] == 1

    def test_source_totals_match_published_counts(self, tmp_path):
        # 163 + 1150 + 177 = 1490 rows across the three archives
        rows = []
        for source, count in (("KMC", 163), ("NIH", 1150), ("IARC", 177)):
            for i in range(count):
                rows.append(
                    {
                        "path": f"img_{source}_{i}.png",
                        "patient_id": f"{source}_p{i // 3}",
                        "source": source,
                        "label": "VIA_POSITIVE" if i % 3 == 0 else "VIA_NEGATIVE",
                    }
                )
        manifest = write_manifest(tmp_path / "m.csv", rows)
        index = ds.ingest(manifest, check_files=False)
        assert sum(index.source_counts.values()) == 1490
        assert index.source_counts[ds.Source.KMC] == 163
        assert index.source_counts[ds.Source.NIH] == 1150
        assert index.source_counts[ds.Source.IARC] == 177

    def test_missing_file_names_the_row(self, tmp_path):
        manifest = write_manifest(
            tmp_path / "m.csv",
            [{"path": "nope.png", "patient_id": "p", "source": "NIH",
              "label": "VIA_NEGATIVE"}],
        )
        with pytest.raises(ds.IngestError, match="row 1"):
            ds.ingest(manifest)

    def test_unknown_label_is_validation_error(self, tmp_path):
        a = make_image(tmp_path, "a.png")
        manifest = write_manifest(
            tmp_path / "m.csv",
            [{"path": a, "patient_id": "p", "source": "NIH", "label": "MAYBE"}],
        )
        with pytest.raises(ds.ValidationError, match="MAYBE"):
            ds.ingest(manifest)

    def test_json_manifest(self, tmp_path):
        a = make_image(tmp_path, "a.png")
        payload = [
            {"path": str(a), "patient_id": "p", "source": "IARC", "label": "VIA_POSITIVE"}
        ]
        manifest = tmp_path / "m.json"
        manifest.write_text(json.dumps(payload))
        index = ds.ingest(manifest)
        assert len(index.records) == 1
        assert index.records[0].source is ds.Source.IARC

    def test_index_json_roundtrip(self, synth_index, tmp_path):
        out = tmp_path / "index.json"
        synth_index.to_json(out)
        back = ds.DatasetIndex.from_json(out)
        assert back.records == synth_index.records


class TestBalance:
    def _index(self, tmp_path, n_pos, n_neg):
        rows = []
        for i in range(n_pos):
            p = make_image(tmp_path, f"pos{i}.png", seed=100 + i)
            rows.append({"path": p, "patient_id": f"pp{i}", "source": "NIH",
                         "label": "VIA_POSITIVE"})
        for i in range(n_neg):
            p = make_image(tmp_path, f"neg{i}.png", seed=200 + i)
            rows.append({"path": p, "patient_id": f"pn{i}", "source": "NIH",
                         "label": "VIA_NEGATIVE"})
        return ds.ingest(write_manifest(tmp_path / "m.csv", rows))

    def test_no_positives_is_noop(self, tmp_path):
        index = self._index(tmp_path, 0, 5)
        result = ds.balance_positives_by_transpose(index)
        assert result.index.records == index.records
        assert result.failures == []

    def test_counts_and_pixel_multiset(self, tmp_path):
        index = self._index(tmp_path, 3, 5)
        result = ds.balance_positives_by_transpose(index, out_dir=tmp_path / "derived")
        counts = result.index.label_counts
        assert counts[ds.ViaLabel.VIA_POSITIVE] == 6
        assert counts[ds.ViaLabel.VIA_NEGATIVE] == 5
        for rec in result.index.records:
            if rec.derived_from is None:
                continue
            origin = result.index.by_id(rec.derived_from)
            a = to_uint8(load_unit(origin.image_ref))
            b = to_uint8(load_unit(rec.image_ref))
            assert b.shape == (a.shape[1], a.shape[0], 3)
            assert sorted(a.reshape(-1, 3).tolist()) == sorted(b.reshape(-1, 3).tolist())
            assert rec.patient_id == origin.patient_id
            assert rec.label is origin.label

    def test_transpose_is_involution(self, rng):
        arr = rng.integers(0, 256, size=(9, 14, 3), dtype=np.uint8)
        assert np.array_equal(transpose_uint8(transpose_uint8(arr)), arr)

    def test_derived_records_not_rebalanced(self, tmp_path):
        index = self._index(tmp_path, 2, 1)
        once = ds.balance_positives_by_transpose(index, out_dir=tmp_path / "d1").index
        twice = ds.balance_positives_by_transpose(once, out_dir=tmp_path / "d2").index
        # only the 2 non-derived positives spawn copies, in both passes
        assert twice.label_counts[ds.ViaLabel.VIA_POSITIVE] == 4

    def test_undecodable_image_reported_and_skipped(self, tmp_path):
        index = self._index(tmp_path, 2, 0)
        Path(index.records[0].image_ref).write_bytes(b"not a png")
        result = ds.balance_positives_by_transpose(index, out_dir=tmp_path / "d")
        assert len(result.failures) == 1
        assert result.failures[0].record_id == index.records[0].record_id
        assert result.index.label_counts[ds.ViaLabel.VIA_POSITIVE] == 3


def synthetic_index(rng, n_patients, max_per_patient=5, positive_rate=0.5):
    records = []
    k = 0
    for p in range(n_patients):
        label = (
            ds.ViaLabel.VIA_POSITIVE
            if rng.random() < positive_rate
            else ds.ViaLabel.VIA_NEGATIVE
        )
        for _ in range(int(rng.integers(1, max_per_patient + 1))):
            records.append(
                ds.CervigramRecord(
                    record_id=f"r{k}",
                    patient_id=f"p{p}",
                    source=ds.Source.SYNTHETIC,
                    label=label,
                    image_ref=Path(f"r{k}.png"),
                )
            )
            k += 1
    return ds.DatasetIndex(records=records)


class TestSplit:
    def test_patients_never_straddle_splits(self, rng):
        records = []
        for p in range(10):
            for i in range(3):
                records.append(
                    ds.CervigramRecord(f"r{p}_{i}", f"p{p}", ds.Source.SYNTHETIC,
                                       ds.ViaLabel.VIA_NEGATIVE, Path("x.png"))
                )
        index = ds.DatasetIndex(records=records)
        for seed in (0, 1, 99):
            assignment = ds.patient_aware_split(index, (0.7, 0.2, 0.1), seed)
            by_patient = {}
            for rec in records:
                by_patient.setdefault(rec.patient_id, set()).add(
                    assignment.split_of(rec.record_id)
                )
            assert all(len(s) == 1 for s in by_patient.values())

    def test_single_patient_lands_in_largest_ratio_split(self):
        records = [
            ds.CervigramRecord(f"r{i}", "solo", ds.Source.SYNTHETIC,
                               ds.ViaLabel.VIA_POSITIVE, Path("x.png"))
            for i in range(4)
        ]
        index = ds.DatasetIndex(records=records)
        with pytest.warns(UserWarning):
            assignment = ds.patient_aware_split(index, (0.2, 0.7, 0.1), seed=5)
        assert all(s is ds.Split.VAL for s in assignment.assignments.values())

    def test_deterministic_for_fixed_seed(self, rng):
        index = synthetic_index(rng, 40)
        a = ds.patient_aware_split(index, (0.7, 0.2, 0.1), seed=7)
        b = ds.patient_aware_split(index, (0.7, 0.2, 0.1), seed=7)
        assert a == b
        c = ds.patient_aware_split(index, (0.7, 0.2, 0.1), seed=8)
        assert a != c

    def test_published_proportions_hit_within_one_patient(self, rng):
        # 1046/301/143 over 1490 records; patients own 1..5 records each
        index = synthetic_index(rng, 500)
        while len(index.records) < 1490:
            index = synthetic_index(rng, 500)
        index = ds.DatasetIndex(records=index.records[:1490])
        ratios = (1046 / 1490, 301 / 1490, 143 / 1490)
        assignment = ds.patient_aware_split(index, ratios, seed=11)
        report = ds.split_report(assignment, index)
        per_patient = Counter(r.patient_id for r in index.records)
        biggest = max(per_patient.values())
        for split, target in zip(ds.Split, (1046, 301, 143)):
            assert abs(report.record_counts[split] - target) <= biggest

    def test_bad_ratios_rejected(self, rng):
        index = synthetic_index(rng, 3)
        with pytest.raises(ValueError):
            ds.patient_aware_split(index, (0.5, 0.5, 0.5), seed=0)
        with pytest.raises(ValueError):
            ds.patient_aware_split(index, (1.2, -0.1, -0.1), seed=0)

    def test_empty_index_rejected(self):
        with pytest.raises(ValueError):
            ds.patient_aware_split(ds.DatasetIndex(), (0.7, 0.2, 0.1), seed=0)

    def test_assignment_json_roundtrip(self, rng, tmp_path):
        index = synthetic_index(rng, 12)
        assignment = ds.patient_aware_split(index, (0.6, 0.2, 0.2), seed=3)
        out = tmp_path / "a.json"
        assignment.to_json(out)
        assert ds.SplitAssignment.from_json(out) == assignment


class TestSplitReport:
    def test_valid_assignment_reports_clean(self, rng):
        index = synthetic_index(rng, 20)
        assignment = ds.patient_aware_split(index, (0.7, 0.2, 0.1), seed=1)
        report = ds.split_report(assignment, index)
        assert sum(report.record_counts.values()) == len(index.records)

    def test_patient_in_two_splits_is_hard_error(self):
        records = [
            ds.CervigramRecord("r0", "pX", ds.Source.SYNTHETIC,
                               ds.ViaLabel.VIA_NEGATIVE, Path("x.png")),
            ds.CervigramRecord("r1", "pX", ds.Source.SYNTHETIC,
                               ds.ViaLabel.VIA_NEGATIVE, Path("x.png")),
        ]
        index = ds.DatasetIndex(records=records)
        assignment = ds.SplitAssignment(
            assignments={"r0": ds.Split.TRAIN, "r1": ds.Split.TEST},
            ratios=(0.7, 0.2, 0.1),
            seed=0,
        )
        with pytest.raises(ds.SplitViolationError, match="pX"):
            ds.split_report(assignment, index)

    def test_balance_moves_label_ratio_toward_parity(self, tmp_path, rng):
        rows = []
        for i in range(4):
            p = make_image(tmp_path, f"pos{i}.png", seed=i)
            rows.append({"path": p, "patient_id": f"p{i}", "source": "NIH",
                         "label": "VIA_POSITIVE"})
        for i in range(10):
            p = make_image(tmp_path, f"neg{i}.png", seed=50 + i)
            rows.append({"path": p, "patient_id": f"q{i}", "source": "NIH",
                         "label": "VIA_NEGATIVE"})
        index = ds.ingest(write_manifest(tmp_path / "m.csv", rows))
        balanced = ds.balance_positives_by_transpose(index, out_dir=tmp_path / "d").index

        def ratio(idx):
            c = idx.label_counts
            return c[ds.ViaLabel.VIA_POSITIVE] / c[ds.ViaLabel.VIA_NEGATIVE]

        assert abs(ratio(balanced) - 1.0) < abs(ratio(index) - 1.0)
