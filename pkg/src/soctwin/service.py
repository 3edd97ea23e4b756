"""What-if HTTP service: loads a cohort (and optionally a fitted checkpoint)
at startup and serves stateless simulation / counterfactual endpoints.

Scenario responses are rendered through one canonical JSON serializer, so an
empty edit list on /whatif is byte-identical to /simulate and identical
request bodies always produce identical response bodies. Long rollouts
(estimated above the slow threshold from a startup micro-benchmark) detach
into background jobs polled at /jobs/{token}; the token is a content hash of
the request, so reposting a pending request joins the same job.
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Literal

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, ConfigDict

from . import __version__
from .errors import SoctwinError, SolverError
from .grid import DomainMask, LaplacianOperator, ScalarField
from .imex import BioParams, RolloutConfig, TwinState, predict_curve, step_interval, threshold_mask
from .metrics import dsc, mask_volume, time_to_progression
from .patient import PatientRecord
from .store import read_checkpoint, read_manifest, read_patient
from .therapy import (
    KILL_MODES,
    SURGERY_MODES,
    ChemoCourse,
    RtFraction,
    SurgeryEvent,
    TreatmentTimeline,
)

_PARAM_FIELDS = ("D", "k", "theta", "alpha_ct", "alpha_rt", "beta_rt")


class ApiError(Exception):
    """Structured client/server error: rendered as {code, message, field}."""

    def __init__(self, status: int, code: str, message: str, field: str | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.field = field


# ------------------------------------------------------------- request models


class EditOp(BaseModel):
    """One timeline edit. Ops apply sequentially; indices address the edited
    arrays as they stand after earlier ops (the echo order: day-sorted)."""

    model_config = ConfigDict(extra="forbid")

    op: Literal[
        "add_rt", "remove_rt", "move_rt", "set_rt_dose",
        "add_surgery", "remove_surgery", "move_surgery",
        "add_chemo", "remove_chemo", "move_chemo", "set_chemo_amplitude",
    ]
    index: int | None = None
    all: bool = False
    day: float | None = None
    dose: float | None = None
    mode: str | None = None
    resect_fraction: float | None = None
    start_day: float | None = None
    amplitude: float | None = None
    decay_rate: float | None = None
    kind: str | None = None


class ParamOverrides(BaseModel):
    model_config = ConfigDict(extra="forbid")

    D: float | None = None
    k: float | None = None
    theta: float | None = None
    alpha_ct: float | None = None
    alpha_rt: float | None = None
    beta_rt: float | None = None


class ConfigOverrides(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps_per_day: int | None = None
    alpha: float | None = None
    tau: float | None = None
    obs_density: float | None = None
    kill_mode: str | None = None
    surgery_mode: str | None = None


class SimulateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    patient_id: str
    horizon: float | None = None
    mask_days: list[float] | None = None
    params: ParamOverrides | None = None
    config: ConfigOverrides | None = None


class WhatIfRequest(SimulateRequest):
    model_config = ConfigDict(extra="forbid")

    edits: list[EditOp] = []


# -------------------------------------------------------------- serialization


def canonical_response(body: dict, status: int = 200) -> Response:
    data = json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return Response(content=data, status_code=status, media_type="application/json")


def _timeline_doc(tl: TreatmentTimeline) -> dict:
    return {
        "surgeries": [
            {"day": s.day, "mode": s.mode, "resect_fraction": s.resect_fraction,
             "erosion_radius": s.erosion_radius, "rim_width": s.rim_width}
            for s in tl.surgeries
        ],
        "rt": [{"day": f.day, "dose": f.dose} for f in tl.rt],
        "chemo": [
            {"start_day": c.start_day, "amplitude": c.amplitude,
             "decay_rate": c.decay_rate, "kind": c.kind}
            for c in tl.chemo
        ],
    }


def _mask_pgm_b64(mask: np.ndarray) -> str:
    h, w = mask.shape
    payload = b"P5\n%d %d\n255\n" % (w, h) + (mask.astype(np.uint8) * 255).tobytes()
    return base64.b64encode(payload).decode("ascii")


def _image_pgm_b64(image: np.ndarray) -> tuple[str, list]:
    lo, hi = float(image.min()), float(image.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    quant = np.clip((image - lo) * scale, 0.0, 255.0).astype(np.uint8)
    h, w = image.shape
    payload = b"P5\n%d %d\n255\n" % (w, h) + quant.tobytes()
    return base64.b64encode(payload).decode("ascii"), [lo, hi]


# ------------------------------------------------------------- timeline edits


def _need(edit: EditOp, i: int, *names):
    for name in names:
        if getattr(edit, name) is None:
            raise ApiError(422, "invalid_edit", f"{edit.op} requires {name}",
                           field=f"edits[{i}].{name}")


def _check_index(seq, edit: EditOp, i: int):
    if edit.index is None:
        raise ApiError(422, "invalid_edit", f"{edit.op} requires index",
                       field=f"edits[{i}].index")
    if not (0 <= edit.index < len(seq)):
        raise ApiError(422, "invalid_edit",
                       f"{edit.op} index {edit.index} out of range [0, {len(seq)})",
                       field=f"edits[{i}].index")


def apply_edits(tl: TreatmentTimeline, edits: list[EditOp]) -> TreatmentTimeline:
    """Pure function: returns a new timeline; malformed ops raise 422.

    Arrays are kept day-sorted after every op, so indices always address the
    same order the timeline echo displays."""
    surgeries = list(tl.surgeries)
    rt = list(tl.rt)
    chemo = list(tl.chemo)
    for i, e in enumerate(edits):
        try:
            if e.op == "add_rt":
                _need(e, i, "day", "dose")
                rt.append(RtFraction(day=e.day, dose=e.dose))
            elif e.op == "remove_rt":
                if e.all:
                    rt = []
                else:
                    _check_index(rt, e, i)
                    rt.pop(e.index)
            elif e.op == "move_rt":
                _check_index(rt, e, i)
                _need(e, i, "day")
                rt[e.index] = RtFraction(day=e.day, dose=rt[e.index].dose)
            elif e.op == "set_rt_dose":
                _check_index(rt, e, i)
                _need(e, i, "dose")
                rt[e.index] = RtFraction(day=rt[e.index].day, dose=e.dose)
            elif e.op == "add_surgery":
                _need(e, i, "day")
                surgeries.append(SurgeryEvent(
                    day=e.day, mode=e.mode or "Mul",
                    resect_fraction=e.resect_fraction if e.resect_fraction is not None else 0.95,
                ))
            elif e.op == "remove_surgery":
                if e.all:
                    surgeries = []
                else:
                    _check_index(surgeries, e, i)
                    surgeries.pop(e.index)
            elif e.op == "move_surgery":
                _check_index(surgeries, e, i)
                _need(e, i, "day")
                s = surgeries[e.index]
                surgeries[e.index] = SurgeryEvent(
                    day=e.day, mode=s.mode, resect_fraction=s.resect_fraction,
                    resection=s.resection, erosion_radius=s.erosion_radius,
                    rim_width=s.rim_width,
                )
            elif e.op == "add_chemo":
                _need(e, i, "start_day", "amplitude", "decay_rate")
                chemo.append(ChemoCourse(
                    start_day=e.start_day, amplitude=e.amplitude,
                    decay_rate=e.decay_rate, kind=e.kind or "chemo",
                ))
            elif e.op == "remove_chemo":
                if e.all:
                    chemo = []
                else:
                    _check_index(chemo, e, i)
                    chemo.pop(e.index)
            elif e.op == "move_chemo":
                _check_index(chemo, e, i)
                _need(e, i, "start_day")
                c = chemo[e.index]
                chemo[e.index] = ChemoCourse(start_day=e.start_day, amplitude=c.amplitude,
                                             decay_rate=c.decay_rate, kind=c.kind)
            elif e.op == "set_chemo_amplitude":
                _check_index(chemo, e, i)
                _need(e, i, "amplitude")
                c = chemo[e.index]
                chemo[e.index] = ChemoCourse(start_day=c.start_day, amplitude=e.amplitude,
                                             decay_rate=c.decay_rate, kind=c.kind)
        except SoctwinError as err:  # event constructor rejected a value
            raise ApiError(422, "invalid_edit", f"{e.op}: {err}", field=f"edits[{i}]") from err
        surgeries.sort(key=lambda s: s.day)
        rt.sort(key=lambda f: f.day)
        chemo.sort(key=lambda c: c.start_day)
    return TreatmentTimeline(surgeries=surgeries, rt=rt, chemo=chemo)


# ------------------------------------------------------------------ app state


class _Twin:
    """Read-only state shared by all requests."""

    def __init__(self, cohort_dir: str, checkpoint: str | None, defaults: dict | None):
        manifest = read_manifest(os.path.join(cohort_dir, "cohort.json"))
        self.manifest = manifest
        self.patients: dict[str, PatientRecord] = {}
        for entry in manifest["patients"]:
            rec, _ = read_patient(os.path.join(cohort_dir, entry["path"]))
            self.patients[rec.id] = rec
        if checkpoint:
            self.params, self.weights, _ = read_checkpoint(checkpoint)
        else:
            self.params = BioParams(D=0.1, k=0.08, alpha_ct=0.03,
                                    alpha_rt=0.03, beta_rt=0.003)
            self.weights = None

        spec = manifest.get("spec", {})
        d = defaults or {}
        self.base_cfg = dict(
            steps_per_day=d.get("steps_per_day", spec.get("steps_per_day", 2)),
            alpha=d.get("alpha", 0.5),
            tau=d.get("tau", spec.get("tau", 0.5)),
            obs_density=d.get("obs_density", spec.get("obs_density_level", 1.0)),
            kill_mode=d.get("kill_mode"),
            surgery_mode=d.get("surgery_mode"),
        )
        self.laps = {pid: LaplacianOperator(rec.domain, rec.spacing)
                     for pid, rec in self.patients.items()}
        self.per_substep_cost = self._benchmark()

    def _benchmark(self) -> float:
        """Seconds per voxel-substep, measured on a small throwaway problem."""
        n = 32
        inside = np.ones((n, n), dtype=bool)
        lap = LaplacianOperator(DomainMask(inside), 1.0)
        values = 0.5 * np.ones((n, n))
        state = TwinState(ScalarField(1.0, values), 0.0)
        params = BioParams(D=0.15, k=0.1)
        tl = TreatmentTimeline()
        cfg = RolloutConfig(steps_per_day=2)
        substeps = 40
        t0 = time.perf_counter()
        step_interval(state, substeps / 2.0, params, tl, lap, cfg)
        dt = time.perf_counter() - t0
        return dt / (n * n * substeps)

    def rollout_cfg(self, overrides: ConfigOverrides | None) -> RolloutConfig:
        c = dict(self.base_cfg)
        if overrides is not None:
            for k, v in overrides.model_dump(exclude_none=True).items():
                c[k] = v
        if c["kill_mode"] is not None and c["kill_mode"] not in KILL_MODES:
            raise ApiError(422, "invalid_config",
                           f"kill_mode must be one of {KILL_MODES}", field="config.kill_mode")
        if c["surgery_mode"] is not None and c["surgery_mode"] not in SURGERY_MODES:
            raise ApiError(422, "invalid_config",
                           f"surgery_mode must be one of {SURGERY_MODES}", field="config.surgery_mode")
        try:
            return RolloutConfig(
                steps_per_day=c["steps_per_day"],
                assimilation_alpha=c["alpha"],
                threshold_tau=c["tau"],
                obs_density_level=c["obs_density"],
                kill_mode=c["kill_mode"],
                surgery_mode=c["surgery_mode"],
            )
        except SoctwinError as err:
            raise ApiError(422, "invalid_config", str(err), field="config") from err

    def effective_params(self, overrides: ParamOverrides | None) -> BioParams:
        if overrides is None:
            return self.params
        vals = {f: getattr(self.params, f) for f in _PARAM_FIELDS}
        vals.update(overrides.model_dump(exclude_none=True))
        try:
            return BioParams(**vals)
        except SoctwinError as err:
            raise ApiError(422, "invalid_params", str(err), field="params") from err


# ------------------------------------------------------------------- scenario


def _run_scenario(twin: _Twin, rec: PatientRecord, tl: TreatmentTimeline,
                  req: SimulateRequest) -> dict:
    cfg = twin.rollout_cfg(req.config)
    params = twin.effective_params(req.params)
    last_obs = rec.observations[-1]
    horizon = req.horizon if req.horizon is not None else last_obs.day
    if horizon < last_obs.day:
        raise ApiError(422, "invalid_horizon",
                       f"horizon {horizon} precedes last observation day {last_obs.day}",
                       field="horizon")

    patched = rec if tl is rec.timeline else _with_timeline(rec, tl)
    try:
        curve = predict_curve(patched, params, cfg, horizon=horizon, lap=twin.laps[rec.id])
    except SolverError as err:
        detail = f"rollout failed: {err}"
        if err.residual is not None:
            detail += f" (residual {err.residual:.3e})"
        raise ApiError(500, "solver_failure", detail) from err

    tau, theta = cfg.threshold_tau, params.theta
    days = [day for day, _ in curve]
    volumes = [
        mask_volume(threshold_mask(f, tau, theta), rec.spacing) for _, f in curve
    ]

    mask_days = req.mask_days if req.mask_days is not None else [days[-1]]
    by_day = {day: f for day, f in curve}
    masks = []
    for d in sorted(set(mask_days)):
        if not (days[0] <= d <= days[-1]):
            raise ApiError(422, "invalid_mask_day",
                           f"mask day {d} outside [{days[0]}, {days[-1]}]", field="mask_days")
        snap = min(days, key=lambda x: (abs(x - d), x))
        masks.append({
            "day": snap,
            "pgm_base64": _mask_pgm_b64(threshold_mask(by_day[snap], tau, theta)),
        })

    score = None
    if horizon <= last_obs.day:
        score = dsc(threshold_mask(by_day[last_obs.day], tau, theta), last_obs.mask)

    return {
        "patient_id": rec.id,
        "curve": {"days": days, "volumes_mm2": volumes},
        "masks": masks,
        "dsc_vs_last_obs": score,
        "ttp_days": time_to_progression(list(zip(days, volumes))),
        "timeline": _timeline_doc(tl),
        "params": {f: getattr(params, f) for f in _PARAM_FIELDS},
        "config": {
            "steps_per_day": cfg.steps_per_day,
            "alpha": cfg.assimilation_alpha,
            "tau": cfg.threshold_tau,
            "obs_density": cfg.obs_density_level,
            "kill_mode": cfg.kill_mode,
            "surgery_mode": cfg.surgery_mode,
        },
        "horizon": horizon,
    }


def _with_timeline(rec: PatientRecord, tl: TreatmentTimeline) -> PatientRecord:
    return PatientRecord(id=rec.id, spacing=rec.spacing, domain=rec.domain,
                         covariates=rec.covariates, timeline=tl,
                         observations=rec.observations)


def _estimate_seconds(twin: _Twin, rec: PatientRecord, req: SimulateRequest) -> float:
    cfg = twin.rollout_cfg(req.config)
    last = rec.observations[-1].day
    horizon = req.horizon if req.horizon is not None else last
    span = max(horizon - rec.observations[0].day, 0.0)
    voxels = rec.domain.inside.size
    return voxels * span * cfg.steps_per_day * twin.per_substep_cost


# ------------------------------------------------------------------- app


def create_app(cohort_dir: str, checkpoint: str | None = None,
               defaults: dict | None = None, slow_threshold_s: float = 5.0) -> FastAPI:
    twin = _Twin(cohort_dir, checkpoint, defaults)
    app = FastAPI(title="soctwin what-if service", version=__version__)
    # browser console may be served from another origin; responses carry no
    # credentials, so a wildcard is safe
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    app.state.twin = twin
    app.state.jobs = {}
    app.state.jobs_lock = threading.Lock()
    app.state.executor = ThreadPoolExecutor(max_workers=2)

    @app.exception_handler(ApiError)
    async def _api_error(_req: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={
            "code": exc.code, "message": exc.message, "field": exc.field,
        })

    @app.exception_handler(RequestValidationError)
    async def _validation_error(_req: Request, exc: RequestValidationError):
        err = exc.errors()[0] if exc.errors() else {}
        loc = ".".join(str(p) for p in err.get("loc", ()) if p != "body")
        return JSONResponse(status_code=422, content={
            "code": "validation_error",
            "message": err.get("msg", "invalid request"),
            "field": loc or None,
        })

    def _get_patient(pid: str) -> PatientRecord:
        rec = twin.patients.get(pid)
        if rec is None:
            raise ApiError(404, "unknown_patient", f"no patient {pid!r} in cohort",
                           field="patient_id")
        return rec

    @app.get("/healthz")
    def healthz():
        return canonical_response({
            "status": "ok",
            "version": __version__,
            "cohort_hash": twin.manifest["content_hash"],
            "n_patients": len(twin.patients),
        })

    @app.get("/patients")
    def patients():
        out = []
        for pid in sorted(twin.patients):
            rec = twin.patients[pid]
            cov = rec.covariates
            out.append({
                "id": pid,
                "scan_days": [o.day for o in rec.observations],
                "covariates": None if cov is None else {
                    "age_years": cov.age_years,
                    "grade": cov.grade,
                    "markers": dict(cov.markers),
                },
            })
        return canonical_response({"patients": out})

    @app.get("/patients/{pid}")
    def patient_detail(pid: str):
        rec = _get_patient(pid)
        cov = rec.covariates
        obs = []
        for o in rec.observations:
            entry = {
                "day": o.day,
                "volume_mm2": mask_volume(o.mask, rec.spacing),
                "mask_pgm_base64": _mask_pgm_b64(o.mask),
                "image_pgm_base64": None,
                "image_range": None,
            }
            if o.image is not None:
                entry["image_pgm_base64"], entry["image_range"] = _image_pgm_b64(o.image)
            obs.append(entry)
        return canonical_response({
            "id": pid,
            "spacing": rec.spacing,
            "grid": list(rec.domain.inside.shape),
            "domain_pgm_base64": _mask_pgm_b64(rec.domain.inside),
            "covariates": None if cov is None else {
                "age_years": cov.age_years, "grade": cov.grade,
                "markers": dict(cov.markers),
            },
            "timeline": _timeline_doc(rec.timeline),
            "observations": obs,
            "baseline_curve": {
                "days": [o.day for o in rec.observations],
                "volumes_mm2": [mask_volume(o.mask, rec.spacing) for o in rec.observations],
            },
        })

    def _scenario_endpoint(req: SimulateRequest, edits: list[EditOp]) -> Response:
        rec = _get_patient(req.patient_id)
        tl = apply_edits(rec.timeline, edits) if edits else rec.timeline
        est = _estimate_seconds(twin, rec, req)
        if est <= slow_threshold_s:
            return canonical_response(_run_scenario(twin, rec, tl, req))

        token = hashlib.sha256(
            json.dumps(req.model_dump(), sort_keys=True, default=str).encode()
            + json.dumps([e.model_dump() for e in edits], sort_keys=True).encode()
        ).hexdigest()[:32]
        with app.state.jobs_lock:
            job = app.state.jobs.get(token)
            if job is None:
                app.state.jobs[token] = {"status": "pending", "response": None, "error": None}

                def work():
                    try:
                        body = _run_scenario(twin, rec, tl, req)
                        with app.state.jobs_lock:
                            app.state.jobs[token] = {"status": "done", "response": body,
                                                     "error": None}
                    except ApiError as err:
                        with app.state.jobs_lock:
                            app.state.jobs[token] = {
                                "status": "error", "response": None,
                                "error": {"code": err.code, "message": err.message,
                                          "field": err.field},
                            }
                    except Exception as err:  # job must never hang in pending
                        with app.state.jobs_lock:
                            app.state.jobs[token] = {
                                "status": "error", "response": None,
                                "error": {"code": "internal", "message": str(err),
                                          "field": None},
                            }

                app.state.executor.submit(work)
        return canonical_response(
            {"status": "accepted", "job": token, "poll": f"/jobs/{token}",
             "estimated_seconds": est},
            status=202,
        )

    @app.post("/simulate")
    def simulate(req: SimulateRequest):
        return _scenario_endpoint(req, [])

    @app.post("/whatif")
    def whatif(req: WhatIfRequest):
        base = SimulateRequest(patient_id=req.patient_id, horizon=req.horizon,
                               mask_days=req.mask_days, params=req.params,
                               config=req.config)
        return _scenario_endpoint(base, req.edits)

    @app.get("/jobs/{token}")
    def job_status(token: str):
        with app.state.jobs_lock:
            job = app.state.jobs.get(token)
            job = copy.deepcopy(job)
        if job is None:
            raise ApiError(404, "unknown_job", f"no job {token!r}", field="token")
        if job["status"] == "pending":
            return canonical_response({"status": "pending"})
        if job["status"] == "error":
            err = job["error"]
            raise ApiError(500, err["code"], err["message"], err["field"])
        return canonical_response(job["response"])

    return app
