"""eICU-format ingestion adapter."""

import pytest

from psvec.eicu import ingest_eicu
from psvec.errors import DataError


PATIENT_HEADER = (
    "patientunitstayid,patienthealthsystemstayid,gender,age,admissionheight,"
    "admissionweight,hospitaladmitoffset,unitdischargeoffset,unitdischargestatus"
)


def write_tables(tmp_path, patient, diagnosis="", medication="", treatment="", vitals=None):
    (tmp_path / "patient.csv").write_text(PATIENT_HEADER + "\n" + patient)
    (tmp_path / "diagnosis.csv").write_text(
        "patientunitstayid,diagnosisoffset,diagnosisstring\n" + diagnosis
    )
    (tmp_path / "medication.csv").write_text(
        "patientunitstayid,drugstartoffset,drugname\n" + medication
    )
    (tmp_path / "treatment.csv").write_text(
        "patientunitstayid,treatmentoffset,treatmentstring\n" + treatment
    )
    (tmp_path / "vitalPeriodic.csv").write_text(
        "patientunitstayid,observationoffset,heartrate,sao2\n" + (vitals or "")
    )


def test_empty_directory_names_first_missing_table(tmp_path):
    with pytest.raises(DataError, match="patient"):
        ingest_eicu(tmp_path)


def test_missing_single_table_is_named(tmp_path):
    write_tables(tmp_path, "")
    (tmp_path / "treatment.csv").unlink()
    with pytest.raises(DataError, match="treatment"):
        ingest_eicu(tmp_path)


def test_three_diagnosis_rows_become_three_events(tmp_path):
    write_tables(
        tmp_path,
        patient="101,900,Female,64,170,80,-120,720,Alive\n",
        diagnosis="101,30,sepsis\n101,90,pneumonia\n101,200,sepsis\n",
        vitals="101,0,80,97\n101,5,82,\n",
    )
    meta, records = ingest_eicu(tmp_path)
    assert len(records) == 1
    rec = records[0]
    assert len(rec.stays) == 1
    assert len(rec.stays[0].codes["diagnosis"]) == 3
    # repeated code string reuses its vocabulary index
    assert meta.vocab["diagnosis"] == ["sepsis", "pneumonia"]
    assert rec.demographics.gender == "F"
    assert rec.demographics.age == 64.0
    assert meta.channels == ["heartrate", "sao2"]
    # second vital row has an empty sao2 cell -> mask 0
    assert rec.stays[0].vitals[1].mask.tolist() == [1, 0]


def test_two_admissions_become_two_records(tmp_path):
    write_tables(
        tmp_path,
        patient=(
            "101,900,Female,64,170,80,0,720,Alive\n"
            "102,901,Female,64,170,80,0,600,Alive\n"
        ),
    )
    _, records = ingest_eicu(tmp_path)
    assert sorted(r.visit_id for r in records) == ["900", "901"]


def test_multistay_visit_readmission_and_mortality(tmp_path):
    write_tables(
        tmp_path,
        patient=(
            "201,950,Male,70,180,90,0,600,Alive\n"
            "202,950,Male,70,180,90,-2880,300,Expired\n"
        ),
    )
    _, records = ingest_eicu(tmp_path)
    assert len(records) == 1
    stays = records[0].stays
    # first stay by hospital-relative offset is 201 (offset 0)
    assert [s.stay_id for s in stays] == ["201", "202"]
    assert stays[0].readmitted_label is True
    assert stays[1].readmitted_label is False
    assert stays[0].mortality_label is False
    assert stays[1].mortality_label is True
    assert stays[1].offset == 48

    # readmission labels survive a second ingest identically
    _, records2 = ingest_eicu(tmp_path)
    assert [s.readmitted_label for s in records2[0].stays] == [True, False]


def test_masked_age_and_unparseable_rows(tmp_path):
    write_tables(
        tmp_path,
        patient=(
            "101,900,Female,> 89,170,80,0,720,Alive\n"
            "bad-row-without-enough-fields\n"
            "103,903,Male,,,,0,240,Alive\n"
        ),
        diagnosis="101,notanumber,sepsis\n101,30,sepsis\n",
    )
    meta, records = ingest_eicu(tmp_path)
    by_id = {r.visit_id: r for r in records}
    assert by_id["900"].demographics.age == 90.0
    assert by_id["903"].demographics.age is None
    assert by_id["903"].demographics.weight is None
    assert len(by_id["900"].stays[0].codes["diagnosis"]) == 1
    assert meta.extra["skipped_rows"]["diagnosis"] == 1
    assert meta.extra["skipped_rows"]["patient"] == 1


def test_code_hours_clamped_to_stay(tmp_path):
    write_tables(
        tmp_path,
        patient="101,900,Female,50,170,80,0,180,Alive\n",  # 3h stay
        diagnosis="101,-30,early\n101,10000,late\n",
    )
    _, records = ingest_eicu(tmp_path)
    hours = sorted(t for t, _ in records[0].stays[0].codes["diagnosis"])
    assert hours == [0, 2]
