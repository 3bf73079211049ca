"""Normalized EHR data model and the line-oriented interchange format.

A dataset on disk is a directory holding ``meta.json`` (stage tag, vital
channel names, per-modality vocabularies, optional normalizer stats) and
``records.jsonl`` with one JSON object per hospital visit.  Every pipeline
stage downstream of ingestion consumes only this format; the schema is
documented in docs/data-format.md.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import MODALITIES

logger = logging.getLogger(__name__)

INTERCHANGE_FORMAT = "psvec-interchange"
INTERCHANGE_VERSION = 1


@dataclass
class Demographics:
    """Age (years), weight (kg), height (cm), gender ('F'/'M'/None).

    Continuous fields are None when missing; after preprocessing they are
    z-scored and imputed.  The encoded vector is [age, weight, height,
    female, male], so |Z| = 5.
    """

    age: float | None = None
    weight: float | None = None
    height: float | None = None
    gender: str | None = None

    Z_DIM = 5

    def encode(self) -> np.ndarray:
        z = np.zeros(self.Z_DIM, dtype=np.float64)
        z[0] = 0.0 if self.age is None else self.age
        z[1] = 0.0 if self.weight is None else self.weight
        z[2] = 0.0 if self.height is None else self.height
        if self.gender == "F":
            z[3] = 1.0
        elif self.gender == "M":
            z[4] = 1.0
        return z


@dataclass
class VitalSample:
    """One time bin of vitals: values over |S| channels plus observation mask.

    mask[i] = 1 iff values[i] was observed before imputation; imputation
    fills values but never touches the mask.
    """

    time: int
    values: np.ndarray
    mask: np.ndarray


@dataclass
class ICUStay:
    stay_id: str
    offset: int                     # hours from hospital admission to ICU admission
    duration: float                 # hours
    codes: dict[str, list[tuple[int, int]]] = field(default_factory=dict)  # modality -> [(hour, code_id)]
    vitals: list[VitalSample] = field(default_factory=list)
    mortality_label: bool = False
    readmitted_label: bool = False

    def __post_init__(self):
        for mod in MODALITIES:
            self.codes.setdefault(mod, [])

    def modality_steps(self, modality: str, max_hour: int | None = None) -> list[tuple[int, list[int]]]:
        """Events of `modality` grouped by hour, sorted, optionally truncated to <= max_hour."""
        by_hour: dict[int, list[int]] = {}
        for hour, code in self.codes[modality]:
            if max_hour is not None and hour > max_hour:
                continue
            by_hour.setdefault(hour, []).append(code)
        return [(h, sorted(by_hour[h])) for h in sorted(by_hour)]


@dataclass
class PatientRecord:
    """One hospital admission: ordered ICU stays plus demographics.

    Timestamps are referenced within the hospital admission; stay-local
    event times are hours since that stay's ICU admission.
    """

    visit_id: str
    stays: list[ICUStay]
    demographics: Demographics

    def __post_init__(self):
        self.stays.sort(key=lambda s: s.offset)


@dataclass
class NormalizerStats:
    """Per-channel mean/std/median for vitals and continuous demographics.

    Channels never observed during fitting (or with zero variance) are
    degenerate and dropped from the active feature set.
    """

    channel_names: list[str]
    mean: np.ndarray
    std: np.ndarray
    median: np.ndarray
    active: list[int]               # indices of non-degenerate channels
    demo_mean: np.ndarray           # age, weight, height
    demo_std: np.ndarray
    demo_median: np.ndarray

    def to_dict(self) -> dict:
        return {
            "channel_names": self.channel_names,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "median": self.median.tolist(),
            "active": list(self.active),
            "demo_mean": self.demo_mean.tolist(),
            "demo_std": self.demo_std.tolist(),
            "demo_median": self.demo_median.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizerStats":
        return cls(
            channel_names=list(d["channel_names"]),
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            median=np.asarray(d["median"], dtype=np.float64),
            active=list(d["active"]),
            demo_mean=np.asarray(d["demo_mean"], dtype=np.float64),
            demo_std=np.asarray(d["demo_std"], dtype=np.float64),
            demo_median=np.asarray(d["demo_median"], dtype=np.float64),
        )


@dataclass
class DatasetMeta:
    stage: str                      # "raw" or "preprocessed"
    vitals_time_unit: str           # "minute" (raw) or "hour" (preprocessed)
    channels: list[str]
    vocab: dict[str, list[str]]     # modality -> code strings, index = position
    normalizer: NormalizerStats | None = None
    extra: dict = field(default_factory=dict)

    def vocab_sizes(self) -> dict[str, int]:
        return {m: len(v) for m, v in self.vocab.items()}

    def to_dict(self) -> dict:
        return {
            "format": INTERCHANGE_FORMAT,
            "version": INTERCHANGE_VERSION,
            "stage": self.stage,
            "vitals_time_unit": self.vitals_time_unit,
            "channels": self.channels,
            "vocab": self.vocab,
            "normalizer": self.normalizer.to_dict() if self.normalizer else None,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetMeta":
        if d.get("format") != INTERCHANGE_FORMAT:
            raise ValueError(f"not an interchange dataset: format={d.get('format')!r}")
        if d.get("version") != INTERCHANGE_VERSION:
            raise ValueError(f"unsupported interchange version {d.get('version')!r}")
        norm = d.get("normalizer")
        return cls(
            stage=d["stage"],
            vitals_time_unit=d["vitals_time_unit"],
            channels=list(d["channels"]),
            vocab={m: list(v) for m, v in d["vocab"].items()},
            normalizer=NormalizerStats.from_dict(norm) if norm else None,
            extra=dict(d.get("extra", {})),
        )


def record_to_json(rec: PatientRecord) -> dict:
    return {
        "visit_id": rec.visit_id,
        "demographics": {
            "age": rec.demographics.age,
            "weight": rec.demographics.weight,
            "height": rec.demographics.height,
            "gender": rec.demographics.gender,
        },
        "stays": [
            {
                "stay_id": s.stay_id,
                "offset": s.offset,
                "duration": s.duration,
                "mortality": bool(s.mortality_label),
                "readmitted": bool(s.readmitted_label),
                "codes": {m: [[int(t), int(c)] for t, c in s.codes[m]] for m in MODALITIES},
                "vitals": [
                    [int(v.time), [float(x) for x in v.values], [int(b) for b in v.mask]]
                    for v in s.vitals
                ],
            }
            for s in rec.stays
        ],
    }


def record_from_json(d: dict) -> PatientRecord:
    stays = []
    for sd in d["stays"]:
        vitals = [
            VitalSample(
                time=int(t),
                values=np.asarray(vals, dtype=np.float64),
                mask=np.asarray(mask, dtype=np.int8),
            )
            for t, vals, mask in sd["vitals"]
        ]
        stays.append(
            ICUStay(
                stay_id=sd["stay_id"],
                offset=int(sd["offset"]),
                duration=float(sd["duration"]),
                codes={m: [(int(t), int(c)) for t, c in sd["codes"].get(m, [])] for m in MODALITIES},
                vitals=vitals,
                mortality_label=bool(sd["mortality"]),
                readmitted_label=bool(sd["readmitted"]),
            )
        )
    demo = d["demographics"]
    return PatientRecord(
        visit_id=d["visit_id"],
        stays=stays,
        demographics=Demographics(
            age=demo.get("age"), weight=demo.get("weight"),
            height=demo.get("height"), gender=demo.get("gender"),
        ),
    )


def save_dataset(dir_path: str | Path, meta: DatasetMeta, records: list[PatientRecord]) -> None:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    with open(dir_path / "meta.json", "w") as f:
        json.dump(meta.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(dir_path / "records.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(record_to_json(rec), sort_keys=True, separators=(",", ":")))
            f.write("\n")


def load_dataset(dir_path: str | Path) -> tuple[DatasetMeta, list[PatientRecord]]:
    dir_path = Path(dir_path)
    meta_path = dir_path / "meta.json"
    records_path = dir_path / "records.jsonl"
    if not meta_path.exists() or not records_path.exists():
        raise FileNotFoundError(f"no interchange dataset at {dir_path}")
    with open(meta_path) as f:
        meta = DatasetMeta.from_dict(json.load(f))
    records = []
    with open(records_path) as f:
        for line in f:
            if line.strip():
                records.append(record_from_json(json.loads(line)))
    return meta, records
