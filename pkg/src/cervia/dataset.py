"""Cervigram dataset index: manifest ingestion, positive balancing, grouped splits.

The manifest file stands in for the original image archives.  Splitting is
done at patient granularity so that no patient's images ever straddle two
splits, which would leak appearance cues across the train/eval boundary.
"""
from __future__ import annotations

import csv
import enum
import json
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .raster import load_unit, save_unit, to_uint8, transpose_uint8, unit_raster


class Source(str, enum.Enum):
    KMC = "KMC"
    NIH = "NIH"
    IARC = "IARC"
    SYNTHETIC = "SYNTHETIC"


class ViaLabel(str, enum.Enum):
    VIA_NEGATIVE = "VIA_NEGATIVE"
    VIA_POSITIVE = "VIA_POSITIVE"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


class IngestError(ValueError):
    """A manifest row could not be ingested (bad path, malformed row)."""


class ValidationError(ValueError):
    """A record or index violates a structural invariant."""


class SplitViolationError(ValueError):
    """A patient's records span more than one split."""


MANIFEST_HEADER = ["path", "patient_id", "source", "label"]


@dataclass(frozen=True)
class CervigramRecord:
    record_id: str
    patient_id: str
    source: Source
    label: ViaLabel
    image_ref: Path
    derived_from: str | None = None


@dataclass
class DatasetIndex:
    records: list[CervigramRecord] = field(default_factory=list)

    @property
    def label_counts(self) -> Counter:
        return Counter(r.label for r in self.records)

    @property
    def source_counts(self) -> Counter:
        return Counter(r.source for r in self.records)

    @property
    def patient_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.patient_id, None)
        return list(seen)

    def by_id(self, record_id: str) -> CervigramRecord:
        for r in self.records:
            if r.record_id == record_id:
                return r
        raise KeyError(record_id)

    def validate(self, check_files: bool = True) -> None:
        ids = [r.record_id for r in self.records]
        if len(ids) != len(set(ids)):
            dup = next(i for i, c in Counter(ids).items() if c > 1)
            raise ValidationError(f"duplicate record_id {dup!r}")
        by_id = {r.record_id: r for r in self.records}
        for r in self.records:
            if r.derived_from is not None:
                origin = by_id.get(r.derived_from)
                if origin is None:
                    raise ValidationError(
                        f"record {r.record_id!r} derives from unknown record {r.derived_from!r}"
                    )
                if origin.derived_from is not None:
                    raise ValidationError(
                        f"record {r.record_id!r} derives from {origin.record_id!r}, "
                        "which is itself derived"
                    )
                if origin.label is not r.label:
                    raise ValidationError(
                        f"derived record {r.record_id!r} label differs from its origin"
                    )
                if origin.patient_id != r.patient_id:
                    raise ValidationError(
                        f"derived record {r.record_id!r} patient differs from its origin"
                    )
            if check_files and not Path(r.image_ref).is_file():
                raise ValidationError(
                    f"record {r.record_id!r}: image {r.image_ref} not found"
                )

    def to_json(self, path: str | Path) -> None:
        payload = {
            "records": [
                {
                    "record_id": r.record_id,
                    "patient_id": r.patient_id,
                    "source": r.source.value,
                    "label": r.label.value,
                    "image_ref": str(r.image_ref),
                    "derived_from": r.derived_from,
                }
                for r in self.records
            ],
            "counts": {
                "labels": {k.value: v for k, v in self.label_counts.items()},
                "sources": {k.value: v for k, v in self.source_counts.items()},
            },
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "DatasetIndex":
        payload = json.loads(Path(path).read_text())
        records = [
            CervigramRecord(
                record_id=r["record_id"],
                patient_id=r["patient_id"],
                source=Source(r["source"]),
                label=ViaLabel(r["label"]),
                image_ref=Path(r["image_ref"]),
                derived_from=r.get("derived_from"),
            )
            for r in payload["records"]
        ]
        return cls(records=records)


def ingest(manifest_path: str | Path, check_files: bool = True) -> DatasetIndex:
    """Read a CSV or JSON manifest into a validated index.

    CSV manifests carry the header ``path,patient_id,source,label``; JSON
    manifests are a list of objects with the same keys.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestError(f"manifest not found: {manifest_path}")
    if manifest_path.suffix.lower() == ".json":
        rows = json.loads(manifest_path.read_text())
        if not isinstance(rows, list):
            raise IngestError("JSON manifest must be a list of objects")
    else:
        with manifest_path.open(newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            missing = [c for c in MANIFEST_HEADER if c not in (reader.fieldnames or [])]
            if missing:
                raise IngestError(f"manifest missing columns: {missing}")
            rows = list(reader)

    records: list[CervigramRecord] = []
    for i, row in enumerate(rows, start=1):
        try:
            label = ViaLabel(row["label"].strip())
        except (KeyError, ValueError):
            raise ValidationError(
                f"manifest row {i}: unknown label {row.get('label')!r}"
            ) from None
        try:
            source = Source(row["source"].strip())
        except (KeyError, ValueError):
            raise ValidationError(
                f"manifest row {i}: unknown source {row.get('source')!r}"
            ) from None
        path = Path(row["path"])
        if not path.is_absolute():
            path = manifest_path.parent / path
        if check_files and not path.is_file():
            raise IngestError(f"manifest row {i}: image not found: {path}")
        records.append(
            CervigramRecord(
                record_id=row.get("record_id") or f"rec{i:05d}",
                patient_id=str(row["patient_id"]),
                source=source,
                label=label,
                image_ref=path,
            )
        )
    index = DatasetIndex(records=records)
    index.validate(check_files=check_files)
    return index


@dataclass(frozen=True)
class BalanceFailure:
    record_id: str
    reason: str


@dataclass
class BalanceResult:
    index: DatasetIndex
    failures: list[BalanceFailure]


def balance_positives_by_transpose(
    index: DatasetIndex, out_dir: str | Path | None = None
) -> BalanceResult:
    """Append one axis-swapped copy of every non-derived positive record.

    Copies inherit label and patient_id so grouped splitting automatically
    keeps original and copy together.  Undecodable images are reported and
    skipped; the operation continues.
    """
    failures: list[BalanceFailure] = []
    new_records = list(index.records)
    already_balanced = {r.derived_from for r in index.records if r.derived_from}
    for rec in index.records:
        if rec.label is not ViaLabel.VIA_POSITIVE or rec.derived_from is not None:
            continue
        if rec.record_id in already_balanced:
            continue
        try:
            arr = to_uint8(load_unit(rec.image_ref))
        except Exception as exc:
            failures.append(BalanceFailure(rec.record_id, str(exc)))
            continue
        transposed = transpose_uint8(arr)
        target_dir = Path(out_dir) if out_dir is not None else Path(rec.image_ref).parent
        target_dir.mkdir(parents=True, exist_ok=True)
        out_path = target_dir / f"{Path(rec.image_ref).stem}_transpose.png"
        save_unit(unit_raster(transposed.astype(np.float32) / 255.0), out_path)
        new_records.append(
            replace(
                rec,
                record_id=f"{rec.record_id}_t",
                image_ref=out_path,
                derived_from=rec.record_id,
            )
        )
    balanced = DatasetIndex(records=new_records)
    balanced.validate(check_files=False)
    return BalanceResult(index=balanced, failures=failures)


@dataclass
class SplitAssignment:
    assignments: dict[str, Split]
    ratios: tuple[float, float, float]
    seed: int

    def split_of(self, record_id: str) -> Split:
        return self.assignments[record_id]

    def record_ids(self, split: Split) -> list[str]:
        return [rid for rid, s in self.assignments.items() if s is split]

    def to_json(self, path: str | Path) -> None:
        payload = {
            "ratios": list(self.ratios),
            "seed": self.seed,
            "assignments": {rid: s.value for rid, s in self.assignments.items()},
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path: str | Path) -> "SplitAssignment":
        payload = json.loads(Path(path).read_text())
        return cls(
            assignments={rid: Split(s) for rid, s in payload["assignments"].items()},
            ratios=tuple(payload["ratios"]),
            seed=int(payload["seed"]),
        )


def patient_aware_split(
    index: DatasetIndex,
    ratios: tuple[float, float, float],
    seed: int,
) -> SplitAssignment:
    """Partition patients (not records) into train/val/test.

    Patients are visited in seeded-shuffle order and each is assigned to the
    split with the largest remaining record-count deficit, so achieved counts
    track ``ratios * len(records)`` to within one patient's record count.
    Deterministic for a fixed (index, ratios, seed).
    """
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    if not index.records:
        raise ValueError("cannot split an empty index")

    per_patient: dict[str, list[str]] = defaultdict(list)
    for r in index.records:
        per_patient[r.patient_id].append(r.record_id)

    total = len(index.records)
    biggest = max(len(v) for v in per_patient.values())
    if biggest > max(ratios) * total:
        warnings.warn(
            f"a single patient owns {biggest} of {total} records, more than the "
            f"largest split target; split proportions will be distorted",
            stacklevel=2,
        )

    patients = sorted(per_patient)
    rng = np.random.default_rng(seed)
    rng.shuffle(patients)

    splits = (Split.TRAIN, Split.VAL, Split.TEST)
    targets = [r * total for r in ratios]
    counts = [0, 0, 0]
    assignments: dict[str, Split] = {}
    for patient in patients:
        deficits = [targets[i] - counts[i] for i in range(3)]
        slot = int(np.argmax(deficits))
        counts[slot] += len(per_patient[patient])
        for rid in per_patient[patient]:
            assignments[rid] = splits[slot]

    ordered = {r.record_id: assignments[r.record_id] for r in index.records}
    return SplitAssignment(assignments=ordered, ratios=tuple(ratios), seed=seed)


@dataclass
class SplitReport:
    record_counts: dict[Split, int]
    label_counts: dict[Split, Counter]
    patient_counts: dict[Split, int]

    def label_balance(self, split: Split) -> float | None:
        """Positive:negative ratio within a split, or None when undefined."""
        c = self.label_counts[split]
        neg = c.get(ViaLabel.VIA_NEGATIVE, 0)
        if neg == 0:
            return None
        return c.get(ViaLabel.VIA_POSITIVE, 0) / neg

    def as_dict(self) -> dict:
        return {
            "record_counts": {s.value: self.record_counts[s] for s in Split},
            "label_counts": {
                s.value: {k.value: v for k, v in self.label_counts[s].items()}
                for s in Split
            },
            "patient_counts": {s.value: self.patient_counts[s] for s in Split},
        }


def split_report(assignment: SplitAssignment, index: DatasetIndex) -> SplitReport:
    """Summarize an assignment and hard-fail on patient-disjointness violations."""
    missing = [r.record_id for r in index.records if r.record_id not in assignment.assignments]
    if missing:
        raise ValidationError(f"assignment does not cover records: {missing[:5]}")

    patient_splits: dict[str, set[Split]] = defaultdict(set)
    record_counts = {s: 0 for s in Split}
    label_counts = {s: Counter() for s in Split}
    patients = {s: set() for s in Split}
    for r in index.records:
        s = assignment.assignments[r.record_id]
        record_counts[s] += 1
        label_counts[s][r.label] += 1
        patients[s].add(r.patient_id)
        patient_splits[r.patient_id].add(s)

    for patient, seen in patient_splits.items():
        if len(seen) > 1:
            names = ", ".join(sorted(x.value for x in seen))
            raise SplitViolationError(
                f"patient {patient!r} appears in multiple splits: {names}"
            )

    return SplitReport(
        record_counts=record_counts,
        label_counts=label_counts,
        patient_counts={s: len(patients[s]) for s in Split},
    )
