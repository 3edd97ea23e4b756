"""Persistence: binary field files, PGM masks, and canonical JSON documents
(patients, checkpoints, cohort manifests).

Field file layout (extension .socf), all little-endian:

    offset  size  content
    0       5     magic b"SOCF1"
    5       4     uint32 width
    9       4     uint32 height
    13      8     float64 spacing (mm)
    21      8     float64 acquisition day
    29      4*w*h float32 values, row-major

Masks are binary PGM (P5, maxval 255): 0 = background, 255 = set; any nonzero
byte reads back as set. JSON documents are canonical: sorted keys, compact
separators, one trailing newline; every document carries a mandatory schema
version string. All writes are atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError, ValidationError
from .grid import DomainMask, ScalarField
from .imex import BioParams
from .patient import Observation, PatientRecord
from .personalize import Covariates, ModulatorWeights
from .therapy import ChemoCourse, RtFraction, SurgeryEvent, TreatmentTimeline

FIELD_MAGIC = b"SOCF1"
FIELD_HEADER = struct.Struct("<5sIIdd")  # magic, width, height, spacing, day
PATIENT_SCHEMA = "soctwin-patient-v1"
CHECKPOINT_SCHEMA = "soctwin-checkpoint-v1"
MANIFEST_SCHEMA = "soctwin-cohort-v1"


def _atomic_write(path: str, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> bytes:
    """Canonical document bytes: sorted keys, compact separators, newline."""
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n").encode()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------- field files


def write_field(path: str, field: ScalarField, day: float = 0.0):
    field.validate_finite()
    header = FIELD_HEADER.pack(FIELD_MAGIC, field.width, field.height, field.spacing, day)
    payload = field.values.astype("<f4").tobytes(order="C")
    _atomic_write(path, header + payload)


def read_field(path: str) -> tuple[ScalarField, float]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < FIELD_HEADER.size:
        raise FormatError(f"file too short for header ({len(blob)} bytes)", offset=len(blob))
    magic, width, height, spacing, day = FIELD_HEADER.unpack_from(blob, 0)
    if magic != FIELD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FIELD_MAGIC!r}", offset=0)
    want = FIELD_HEADER.size + 4 * width * height
    if len(blob) != want:
        raise FormatError(
            f"payload length mismatch: file has {len(blob)} bytes, expected {want}",
            offset=FIELD_HEADER.size,
        )
    values = np.frombuffer(blob, dtype="<f4", offset=FIELD_HEADER.size).reshape(height, width)
    return ScalarField(spacing, values.astype(np.float64)), day


# ----------------------------------------------------------------- PGM masks


def write_mask(path: str, mask: np.ndarray):
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2D, got ndim={mask.ndim}")
    h, w = mask.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    _atomic_write(path, header + (mask.astype(np.uint8) * 255).tobytes(order="C"))


def read_mask(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    # tokenized header: magic, width, height, maxval; '#' comments allowed
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(blob):
            raise FormatError("truncated PGM header", offset=pos)
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})", offset=0)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise FormatError(f"bad PGM header token: {e}", offset=0) from e
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}", offset=0)
    pos += 1  # single whitespace after maxval
    if len(blob) - pos != w * h:
        raise FormatError(
            f"payload length mismatch: {len(blob) - pos} bytes for {w}x{h}", offset=pos
        )
    return (np.frombuffer(blob, dtype=np.uint8, offset=pos).reshape(h, w) != 0)


# ------------------------------------------------------------- JSON documents


def _timeline_to_json(tl: TreatmentTimeline, field_paths: dict) -> dict:
    surgeries = []
    for i, ev in enumerate(tl.surgeries):
        d = {
            "day": ev.day,
            "mode": ev.mode,
            "resect_fraction": ev.resect_fraction,
            "erosion_radius": ev.erosion_radius,
            "rim_width": ev.rim_width,
            "resection": field_paths.get(id(ev)),
        }
        surgeries.append(d)
    return {
        "kill_mode": tl.kill_mode,
        "synergy_gain": tl.synergy_gain,
        "saturation_half": tl.saturation_half,
        "surgeries": surgeries,
        "rt": [{"day": fr.day, "dose": fr.dose} for fr in tl.rt],
        "chemo": [
            {"start_day": c.start_day, "amplitude": c.amplitude, "decay_rate": c.decay_rate, "kind": c.kind}
            for c in tl.chemo
        ],
    }


def write_patient(path: str, patient: PatientRecord, truth: dict | None = None) -> list[str]:
    """Write a patient document plus its sidecar mask/field files.

    Sidecars live next to the JSON and are referenced by relative path.
    Returns every file written (relative to the JSON's directory) so callers
    can hash cohort content.
    """
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    written = []

    def put_mask(rel, mask):
        write_mask(os.path.join(base, rel), mask)
        written.append(rel)

    def put_field(rel, fld, day=0.0):
        write_field(os.path.join(base, rel), fld, day)
        written.append(rel)

    put_mask("domain.pgm", patient.domain.inside)

    resection_paths = {}
    for i, ev in enumerate(patient.timeline.surgeries):
        if ev.resection is not None:
            rel = f"surgery_{i:02d}_resection.socf"
            put_field(rel, ev.resection, ev.day)
            resection_paths[id(ev)] = rel

    observations = []
    for i, obs in enumerate(patient.observations):
        mrel = f"obs_{i:03d}_mask.pgm"
        put_mask(mrel, obs.mask)
        entry = {"day": obs.day, "mask": mrel, "image": None}
        if obs.image is not None:
            irel = f"obs_{i:03d}_img.socf"
            put_field(irel, ScalarField(patient.spacing, obs.image), obs.day)
            entry["image"] = irel
        observations.append(entry)

    cov = None
    if patient.covariates is not None:
        cov = {
            "age_years": patient.covariates.age_years,
            "grade": patient.covariates.grade,
            "markers": dict(patient.covariates.markers),
        }

    doc = {
        "schema": PATIENT_SCHEMA,
        "id": patient.id,
        "spacing": patient.spacing,
        "domain_mask": "domain.pgm",
        "covariates": cov,
        "timeline": _timeline_to_json(patient.timeline, resection_paths),
        "observations": observations,
        "truth": truth,
    }
    _atomic_write(path, canonical_json(doc))
    written.append(os.path.basename(path))
    return written


def read_patient(path: str) -> tuple[PatientRecord, dict | None]:
    with open(path, "rb") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"patient document is not valid JSON: {e}") from e
    if doc.get("schema") != PATIENT_SCHEMA:
        raise FormatError(
            f"schema mismatch: got {doc.get('schema')!r}, want {PATIENT_SCHEMA!r}"
        )
    base = os.path.dirname(os.path.abspath(path))

    domain = DomainMask(read_mask(os.path.join(base, doc["domain_mask"])))

    t = doc["timeline"]
    surgeries = []
    for s in t["surgeries"]:
        resection = None
        if s.get("resection"):
            resection, _ = read_field(os.path.join(base, s["resection"]))
        surgeries.append(
            SurgeryEvent(
                day=s["day"],
                mode=s["mode"],
                resection=resection,
                resect_fraction=s.get("resect_fraction", 1.0),
                erosion_radius=s.get("erosion_radius", 0),
                rim_width=s.get("rim_width", 0),
            )
        )
    timeline = TreatmentTimeline(
        surgeries=surgeries,
        rt=[RtFraction(day=r["day"], dose=r["dose"]) for r in t["rt"]],
        chemo=[
            ChemoCourse(
                start_day=c["start_day"],
                amplitude=c["amplitude"],
                decay_rate=c["decay_rate"],
                kind=c.get("kind", "chemo"),
            )
            for c in t["chemo"]
        ],
        kill_mode=t.get("kill_mode", "Additive"),
        synergy_gain=t.get("synergy_gain", 0.0),
        saturation_half=t.get("saturation_half", 1.0),
    )

    observations = []
    for o in doc["observations"]:
        mask = read_mask(os.path.join(base, o["mask"]))
        image = None
        if o.get("image"):
            img_field, _ = read_field(os.path.join(base, o["image"]))
            image = img_field.values
        observations.append(Observation(day=o["day"], mask=mask, image=image))

    cov = None
    if doc.get("covariates") is not None:
        c = doc["covariates"]
        cov = Covariates(
            age_years=c["age_years"],
            grade=c["grade"],
            markers={k: int(v) for k, v in c.get("markers", {}).items()},
        )

    record = PatientRecord(
        id=doc["id"],
        spacing=doc["spacing"],
        domain=domain,
        covariates=cov,
        timeline=timeline,
        observations=observations,
    )
    return record, doc.get("truth")


def write_checkpoint(
    path: str,
    params: BioParams,
    weights: ModulatorWeights | None = None,
    optim: dict | None = None,
):
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "params": {
            "D": params.D,
            "k": params.k,
            "theta": params.theta,
            "alpha_ct": params.alpha_ct,
            "alpha_rt": params.alpha_rt,
            "beta_rt": params.beta_rt,
        },
        "weights": None,
        "optim": optim,
    }
    if weights is not None:
        doc["weights"] = {
            "w1": weights.w1.tolist(),
            "b1": weights.b1.tolist(),
            "w2": weights.w2.tolist(),
            "b2": weights.b2.tolist(),
            "clamp_lo": weights.clamp_lo,
            "clamp_hi": weights.clamp_hi,
        }
    _atomic_write(path, canonical_json(doc))


def read_checkpoint(path: str) -> tuple[BioParams, ModulatorWeights | None, dict | None]:
    with open(path, "rb") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"checkpoint is not valid JSON: {e}") from e
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise FormatError(
            f"schema mismatch: got {doc.get('schema')!r}, want {CHECKPOINT_SCHEMA!r}"
        )
    p = doc["params"]
    params = BioParams(
        D=p["D"], k=p["k"], theta=p["theta"],
        alpha_ct=p["alpha_ct"], alpha_rt=p["alpha_rt"], beta_rt=p["beta_rt"],
    )
    weights = None
    if doc.get("weights") is not None:
        w = doc["weights"]
        weights = ModulatorWeights(
            np.array(w["w1"]), np.array(w["b1"]), np.array(w["w2"]), np.array(w["b2"]),
            clamp_lo=w.get("clamp_lo", 0.25), clamp_hi=w.get("clamp_hi", 4.0),
        )
    return params, weights, doc.get("optim")


def write_manifest(path: str, manifest: dict):
    """Write a cohort manifest, stamping schema and content hash.

    The hash covers the canonical bytes of the whole document minus the
    content_hash field itself; regeneration with the same inputs reproduces it
    bit for bit.
    """
    doc = dict(manifest)
    doc["schema"] = MANIFEST_SCHEMA
    doc.pop("content_hash", None)
    doc["content_hash"] = sha256_hex(canonical_json(doc))
    _atomic_write(path, canonical_json(doc))


def read_manifest(path: str, verify: bool = True) -> dict:
    with open(path, "rb") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"manifest is not valid JSON: {e}") from e
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise FormatError(f"schema mismatch: got {doc.get('schema')!r}, want {MANIFEST_SCHEMA!r}")
    if verify:
        body = dict(doc)
        stored = body.pop("content_hash", None)
        body["content_hash"] = sha256_hex(canonical_json(body))
        if stored != body["content_hash"]:
            raise FormatError("manifest content hash mismatch")
    return doc
