"""Ingestion adapter for eICU-format CSV exports.

Reads the five tables the pipeline uses (patient, diagnosis, medication,
treatment, vitalPeriodic) and produces one PatientRecord per hospital
admission, with per-modality vocabularies built from the corpus.  Column
expectations are documented in docs/data-format.md.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np

from .errors import DataError
from .records import DatasetMeta, Demographics, ICUStay, PatientRecord, VitalSample
from .util import MODALITIES

logger = logging.getLogger(__name__)

TABLES = ("patient", "diagnosis", "medication", "treatment", "vitalPeriodic")

CODE_TABLES = {
    "diagnosis": ("diagnosisoffset", "diagnosisstring"),
    "medication": ("drugstartoffset", "drugname"),
    "treatment": ("treatmentoffset", "treatmentstring"),
}


def _table_path(dir_path: Path, name: str) -> Path:
    for candidate in (dir_path / f"{name}.csv", dir_path / f"{name}.csv.gz"):
        if candidate.exists():
            return candidate
    raise DataError(f"missing required table '{name}' in {dir_path}")


def _open_rows(path: Path):
    if path.suffix == ".gz":
        import gzip

        return gzip.open(path, "rt", newline="")
    return open(path, newline="")


def _parse_age(raw: str) -> float | None:
    raw = raw.strip()
    if not raw:
        return None
    if raw.startswith(">"):
        # eICU masks ages over 89
        try:
            return float(raw.lstrip("> ")) + 1.0
        except ValueError:
            return None
    try:
        return float(raw)
    except ValueError:
        return None


def _parse_float(raw: str) -> float | None:
    raw = raw.strip()
    if not raw:
        return None
    try:
        v = float(raw)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


class Vocab:
    """Code-string vocabulary; unknown strings get the next free index."""

    def __init__(self):
        self.index: dict[str, int] = {}
        self.names: list[str] = []

    def get(self, name: str) -> int:
        if name not in self.index:
            self.index[name] = len(self.names)
            self.names.append(name)
        return self.index[name]


def ingest_eicu(dir_path: str | Path) -> tuple[DatasetMeta, list[PatientRecord]]:
    """Load an eICU-format directory into the raw interchange model.

    Vitals come through at their native minute cadence for later binning;
    code event times are binned to hours since ICU admission immediately.
    Unparseable rows are skipped and counted; missing tables are fatal.
    """
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise DataError(f"not a directory: {dir_path}")
    paths = {name: _table_path(dir_path, name) for name in TABLES}

    skipped: dict[str, int] = {name: 0 for name in TABLES}
    stays: dict[str, dict] = {}
    visit_of_stay: dict[str, str] = {}
    visit_order: list[str] = []
    visits: dict[str, dict] = {}

    with _open_rows(paths["patient"]) as f:
        for row in csv.DictReader(f):
            try:
                stay_id = row["patientunitstayid"].strip()
                visit_id = row["patienthealthsystemstayid"].strip()
                if not stay_id or not visit_id:
                    raise ValueError("empty id")
                duration_h = float(row["unitdischargeoffset"]) / 60.0
                if duration_h <= 0:
                    raise ValueError("non-positive stay duration")
                # hospitaladmitoffset: minutes from unit admission back to
                # hospital admission (usually negative)
                offset_h = int(round(-float(row["hospitaladmitoffset"]) / 60.0))
                offset_h = max(0, offset_h)
            except (KeyError, ValueError, AttributeError, TypeError):
                skipped["patient"] += 1
                continue
            gender_raw = row.get("gender", "").strip().lower()
            gender = {"female": "F", "f": "F", "male": "M", "m": "M"}.get(gender_raw)
            if visit_id not in visits:
                visits[visit_id] = {
                    "age": _parse_age(row.get("age", "")),
                    "weight": _parse_float(row.get("admissionweight", "")),
                    "height": _parse_float(row.get("admissionheight", "")),
                    "gender": gender,
                }
                visit_order.append(visit_id)
            stays[stay_id] = {
                "visit": visit_id,
                "offset": offset_h,
                "duration": duration_h,
                "mortality": row.get("unitdischargestatus", "").strip().lower() == "expired",
                "codes": {m: [] for m in MODALITIES},
                "vitals": [],
            }
            visit_of_stay[stay_id] = visit_id

    vocabs = {m: Vocab() for m in MODALITIES}
    for modality, (offset_col, name_col) in CODE_TABLES.items():
        with _open_rows(paths[modality]) as f:
            for row in csv.DictReader(f):
                try:
                    stay_id = row["patientunitstayid"].strip()
                    offset_min = float(row[offset_col])
                    name = row[name_col].strip()
                    if not name:
                        raise ValueError("empty code string")
                except (KeyError, ValueError, AttributeError, TypeError):
                    skipped[modality] += 1
                    continue
                stay = stays.get(stay_id)
                if stay is None:
                    skipped[modality] += 1
                    continue
                code_id = vocabs[modality].get(name)
                max_bin = max(0, math.ceil(stay["duration"]) - 1)
                hour = min(max(0, int(offset_min // 60)), max_bin)
                stay["codes"][modality].append((hour, code_id))

    channels: list[str] = []
    with _open_rows(paths["vitalPeriodic"]) as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        channels = [c for c in header if c not in ("patientunitstayid", "observationoffset")]
        if not channels:
            raise DataError("vitalPeriodic has no vital channel columns")
        for row in reader:
            try:
                stay_id = row["patientunitstayid"].strip()
                offset_min = float(row["observationoffset"])
            except (KeyError, ValueError, AttributeError, TypeError):
                skipped["vitalPeriodic"] += 1
                continue
            stay = stays.get(stay_id)
            if stay is None:
                skipped["vitalPeriodic"] += 1
                continue
            if offset_min < 0 or offset_min > stay["duration"] * 60.0:
                skipped["vitalPeriodic"] += 1
                continue
            values = np.zeros(len(channels))
            mask = np.zeros(len(channels), dtype=np.int8)
            for i, ch in enumerate(channels):
                v = _parse_float(row.get(ch, ""))
                if v is not None:
                    values[i] = v
                    mask[i] = 1
            stay["vitals"].append(VitalSample(time=int(offset_min), values=values, mask=mask))

    records = []
    for visit_id in visit_order:
        demo = visits[visit_id]
        visit_stays = sorted(
            (sid for sid, s in stays.items() if s["visit"] == visit_id),
            key=lambda sid: (stays[sid]["offset"], sid),
        )
        built = []
        for i, sid in enumerate(visit_stays):
            s = stays[sid]
            built.append(
                ICUStay(
                    stay_id=sid,
                    offset=s["offset"],
                    duration=s["duration"],
                    codes=s["codes"],
                    vitals=sorted(s["vitals"], key=lambda v: v.time),
                    mortality_label=s["mortality"],
                    readmitted_label=i < len(visit_stays) - 1,
                )
            )
        records.append(
            PatientRecord(
                visit_id=visit_id,
                stays=built,
                demographics=Demographics(
                    age=demo["age"], weight=demo["weight"],
                    height=demo["height"], gender=demo["gender"],
                ),
            )
        )

    total_skipped = sum(skipped.values())
    if total_skipped:
        logger.warning("skipped %d unparseable/orphan rows: %s", total_skipped, skipped)
    meta = DatasetMeta(
        stage="raw",
        vitals_time_unit="minute",
        channels=channels,
        vocab={m: list(vocabs[m].names) for m in MODALITIES},
        extra={"source": "eicu", "skipped_rows": skipped},
    )
    return meta, records
