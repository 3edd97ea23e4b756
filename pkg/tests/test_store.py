"""Persistence tests: byte-exact goldens, roundtrips, corruption handling."""

import json
import os
import struct

import numpy as np
import pytest

from soctwin import FormatError
from soctwin.grid import DomainMask, ScalarField
from soctwin.imex import BioParams
from soctwin.patient import Observation, PatientRecord
from soctwin.personalize import Covariates, ModulatorWeights
from soctwin.store import (
    canonical_json,
    read_checkpoint,
    read_field,
    read_manifest,
    read_mask,
    read_patient,
    write_checkpoint,
    write_field,
    write_manifest,
    write_mask,
    write_patient,
)
from soctwin.therapy import ChemoCourse, RtFraction, SurgeryEvent, TreatmentTimeline


def _no_temp_leftovers(d):
    return not [f for f in os.listdir(d) if f.startswith(".tmp-")]


class TestFieldFile:
    def test_golden_bytes(self, tmp_path):
        # header layout is a wire contract: magic, u32 w, u32 h, f64 spacing, f64 day
        vals = np.array([[0.25, -1.5, 3.0], [0.0, 2.0, -0.125]])
        p = str(tmp_path / "f.socf")
        write_field(p, ScalarField(1.5, vals), day=7.25)
        blob = open(p, "rb").read()
        expected = (
            b"SOCF1"
            + (3).to_bytes(4, "little")
            + (2).to_bytes(4, "little")
            + struct.pack("<d", 1.5)
            + struct.pack("<d", 7.25)
            + vals.astype("<f4").tobytes()
        )
        assert blob == expected

    def test_roundtrip_float32_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        vals = rng.uniform(-5, 5, size=(9, 7))
        p = str(tmp_path / "f.socf")
        write_field(p, ScalarField(0.75, vals), day=13.5)
        field, day = read_field(p)
        assert day == 13.5
        assert field.spacing == 0.75
        assert field.values.shape == (9, 7)
        # storage is float32; the readback must match the quantized values exactly
        np.testing.assert_array_equal(field.values, vals.astype(np.float32).astype(np.float64))

    def test_rewrite_is_deterministic(self, tmp_path):
        vals = np.arange(12.0).reshape(3, 4)
        a, b = str(tmp_path / "a.socf"), str(tmp_path / "b.socf")
        write_field(a, ScalarField(1.0, vals), day=2.0)
        write_field(b, ScalarField(1.0, vals), day=2.0)
        assert open(a, "rb").read() == open(b, "rb").read()
        assert _no_temp_leftovers(tmp_path)

    def test_truncated_header(self, tmp_path):
        p = str(tmp_path / "bad.socf")
        with open(p, "wb") as f:
            f.write(b"SOCF1\x01\x00")
        with pytest.raises(FormatError) as ei:
            read_field(p)
        assert ei.value.offset == 7

    def test_bad_magic(self, tmp_path):
        p = str(tmp_path / "bad.socf")
        with open(p, "wb") as f:
            f.write(b"NOPE!" + b"\x00" * 24)
        with pytest.raises(FormatError) as ei:
            read_field(p)
        assert ei.value.offset == 0

    def test_payload_length_mismatch(self, tmp_path):
        p = str(tmp_path / "f.socf")
        write_field(p, ScalarField(1.0, np.ones((2, 2))))
        blob = open(p, "rb").read()
        with open(p, "wb") as f:
            f.write(blob[:-3])  # drop payload bytes
        with pytest.raises(FormatError) as ei:
            read_field(p)
        assert ei.value.offset == 29


class TestPgmMask:
    def test_golden_header(self, tmp_path):
        m = np.zeros((2, 3), bool)
        m[0, 1] = True
        p = str(tmp_path / "m.pgm")
        write_mask(p, m)
        blob = open(p, "rb").read()
        assert blob == b"P5\n3 2\n255\n" + bytes([0, 255, 0, 0, 0, 0])

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        m = rng.random((12, 8)) < 0.4
        p = str(tmp_path / "m.pgm")
        write_mask(p, m)
        np.testing.assert_array_equal(read_mask(p), m)

    def test_comments_and_nonzero_values(self, tmp_path):
        # foreign writers may emit comments and intermediate gray levels
        p = str(tmp_path / "m.pgm")
        with open(p, "wb") as f:
            f.write(b"P5\n# made elsewhere\n2 2\n255\n" + bytes([0, 7, 255, 0]))
        got = read_mask(p)
        np.testing.assert_array_equal(got, np.array([[False, True], [True, False]]))

    def test_wrong_maxval(self, tmp_path):
        p = str(tmp_path / "m.pgm")
        with open(p, "wb") as f:
            f.write(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(FormatError):
            read_mask(p)

    def test_truncated(self, tmp_path):
        p = str(tmp_path / "m.pgm")
        with open(p, "wb") as f:
            f.write(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(FormatError):
            read_mask(p)

    def test_not_pgm(self, tmp_path):
        p = str(tmp_path / "m.pgm")
        with open(p, "wb") as f:
            f.write(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(FormatError):
            read_mask(p)


def _demo_patient():
    inside = np.zeros((8, 8), bool)
    inside[1:7, 1:7] = True
    resec = np.zeros((8, 8))
    resec[3:5, 3:5] = 0.9
    timeline = TreatmentTimeline(
        surgeries=[
            SurgeryEvent(day=5.0, mode="Mul", resection=ScalarField(1.25, resec)),
            SurgeryEvent(day=40.0, mode="Rim", rim_width=2),
        ],
        rt=[RtFraction(day=10.0, dose=2.0), RtFraction(day=11.0, dose=2.0)],
        chemo=[ChemoCourse(start_day=10.0, amplitude=1.0, decay_rate=0.099, kind="tmz")],
        kill_mode="Synergy",
        synergy_gain=0.5,
        saturation_half=1.0,
    )
    m0 = np.zeros((8, 8), bool)
    m0[3:5, 3:5] = True
    m1 = np.zeros((8, 8), bool)
    m1[2:6, 2:6] = True
    img = np.linspace(0.0, 1.0, 64).reshape(8, 8)
    return PatientRecord(
        id="pt-0007",
        spacing=1.25,
        domain=DomainMask(inside),
        covariates=Covariates(age_years=54.0, grade=4, markers={"mgmt_methylated": 1, "idh_mutant": 0}),
        timeline=timeline,
        observations=[Observation(day=0.0, mask=m0), Observation(day=30.0, mask=m1, image=img)],
    )


class TestPatientDocument:
    def test_roundtrip(self, tmp_path):
        pt = _demo_patient()
        p = str(tmp_path / "patient.json")
        truth = {"D": 0.15, "k": 0.05, "seed": 42}
        written = write_patient(p, pt, truth=truth)
        assert "patient.json" in written
        assert "domain.pgm" in written
        assert "surgery_00_resection.socf" in written
        assert "obs_001_img.socf" in written
        assert _no_temp_leftovers(tmp_path)

        got, got_truth = read_patient(p)
        assert got_truth == truth
        assert got.id == pt.id and got.spacing == pt.spacing
        np.testing.assert_array_equal(got.domain.inside, pt.domain.inside)
        assert got.covariates.age_years == 54.0 and got.covariates.grade == 4
        assert got.covariates.markers == {"mgmt_methylated": 1, "idh_mutant": 0}

        tl = got.timeline
        assert tl.kill_mode == "Synergy" and tl.synergy_gain == 0.5
        assert [s.day for s in tl.surgeries] == [5.0, 40.0]
        assert tl.surgeries[0].mode == "Mul"
        np.testing.assert_array_equal(
            tl.surgeries[0].resection.values,
            pt.timeline.surgeries[0].resection.values.astype(np.float32).astype(np.float64),
        )
        assert tl.surgeries[1].resection is None and tl.surgeries[1].rim_width == 2
        assert [(r.day, r.dose) for r in tl.rt] == [(10.0, 2.0), (11.0, 2.0)]
        assert tl.chemo[0].kind == "tmz" and tl.chemo[0].decay_rate == 0.099

        assert [o.day for o in got.observations] == [0.0, 30.0]
        np.testing.assert_array_equal(got.observations[1].mask, pt.observations[1].mask)
        assert got.observations[0].image is None
        np.testing.assert_array_equal(
            got.observations[1].image,
            pt.observations[1].image.astype(np.float32).astype(np.float64),
        )

    def test_document_is_canonical_json(self, tmp_path):
        p = str(tmp_path / "patient.json")
        write_patient(p, _demo_patient())
        blob = open(p, "rb").read()
        assert blob == canonical_json(json.loads(blob))

    def test_schema_rejected(self, tmp_path):
        p = str(tmp_path / "patient.json")
        with open(p, "w") as f:
            json.dump({"schema": "other-v9"}, f)
        with pytest.raises(FormatError):
            read_patient(p)

    def test_garbage_rejected(self, tmp_path):
        p = str(tmp_path / "patient.json")
        with open(p, "w") as f:
            f.write("{not json")
        with pytest.raises(FormatError):
            read_patient(p)


class TestCheckpoint:
    def test_roundtrip_exact_floats(self, tmp_path):
        # awkward values that only survive if floats round-trip through repr
        params = BioParams(
            D=np.nextafter(0.15, 1.0), k=0.1 + 1e-16, theta=1.0,
            alpha_ct=1.0 / 3.0, alpha_rt=0.3, beta_rt=0.03,
        )
        w = ModulatorWeights.random(99, scale=0.37)
        optim = {"iters": 120, "lr": 0.05}
        p = str(tmp_path / "ckpt.json")
        write_checkpoint(p, params, weights=w, optim=optim)
        got_p, got_w, got_o = read_checkpoint(p)
        for name in ("D", "k", "theta", "alpha_ct", "alpha_rt", "beta_rt"):
            assert getattr(got_p, name) == getattr(params, name)
        np.testing.assert_array_equal(got_w.w1, w.w1)
        np.testing.assert_array_equal(got_w.b1, w.b1)
        np.testing.assert_array_equal(got_w.w2, w.w2)
        np.testing.assert_array_equal(got_w.b2, w.b2)
        assert got_w.clamp_lo == w.clamp_lo and got_w.clamp_hi == w.clamp_hi
        assert got_o == optim

    def test_no_weights(self, tmp_path):
        p = str(tmp_path / "ckpt.json")
        write_checkpoint(p, BioParams(D=0.1, k=0.05, alpha_ct=0.2, alpha_rt=0.3, beta_rt=0.03))
        got_p, got_w, got_o = read_checkpoint(p)
        assert got_w is None and got_o is None
        assert got_p.k == 0.05

    def test_schema_rejected(self, tmp_path):
        p = str(tmp_path / "ckpt.json")
        with open(p, "w") as f:
            json.dump({"schema": "soctwin-patient-v1"}, f)
        with pytest.raises(FormatError):
            read_checkpoint(p)


class TestManifest:
    def test_write_read_verify(self, tmp_path):
        p = str(tmp_path / "cohort.json")
        write_manifest(p, {"seed": 7, "n": 3, "files": {"p0": "abc"}})
        doc = read_manifest(p)
        assert doc["seed"] == 7 and doc["schema"] == "soctwin-cohort-v1"
        assert len(doc["content_hash"]) == 64

    def test_regeneration_reproduces_bytes(self, tmp_path):
        a, b = str(tmp_path / "a.json"), str(tmp_path / "b.json")
        payload = {"seed": 13, "n": 2, "files": {"x": "1", "y": "2"}}
        write_manifest(a, payload)
        write_manifest(b, payload)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_tamper_detected(self, tmp_path):
        p = str(tmp_path / "cohort.json")
        write_manifest(p, {"seed": 7, "n": 3})
        doc = json.loads(open(p, "rb").read())
        doc["n"] = 4
        with open(p, "wb") as f:
            f.write(canonical_json(doc))
        with pytest.raises(FormatError):
            read_manifest(p)
        assert read_manifest(p, verify=False)["n"] == 4

    def test_stale_hash_field_ignored_on_write(self, tmp_path):
        # a content_hash in the input must not poison the fresh stamp
        a, b = str(tmp_path / "a.json"), str(tmp_path / "b.json")
        write_manifest(a, {"seed": 1, "content_hash": "deadbeef"})
        write_manifest(b, {"seed": 1})
        assert open(a, "rb").read() == open(b, "rb").read()
