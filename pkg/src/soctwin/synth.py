"""Synthetic cohort generator: seeded phantoms with two-tissue kinetics maps,
covariates drawn from published cohort frequencies, guideline-style treatment
timelines, forward-simulated ground-truth trajectories, and scan rendering
(bias field, k-space low-pass, Rician noise, boundary jitter).

Every patient's randomness flows from SeedSequence([cohort_seed, patient_idx]);
the per-purpose child sequences are split once in patient_seeds, so any single
ingredient (covariates, timeline, ...) can be re-derived without simulating.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

from .errors import ConfigError, ValidationError
from .grid import DomainMask, LaplacianOperator, ScalarField
from .imex import BioParams, RolloutConfig, TwinState, step_interval
from .patient import Observation, PatientRecord
from .personalize import Covariates
from .store import sha256_hex, write_field, write_manifest, write_patient
from .therapy import ChemoCourse, RtFraction, SurgeryEvent, TreatmentTimeline, dilate_mask, erode_mask

KINDS = ("AG", "HCC", "NAC")

# cohort marker frequencies (counts per 200) behind sample_covariates
AG_MARKERS = (
    ("idh_mutant", 64 / 200),
    ("mgmt_methylated", 83 / 200),
    ("egfr_amplified", 68 / 200),
    ("codeleted_1p19q", 22 / 200),
    ("cdkn2ab_deleted", 61 / 200),
    ("tp53_mutant", 89 / 200),
    ("tert_mutant", 109 / 200),
    ("atrx_loss", 19 / 200),
)
NAC_MARKERS = (
    ("er_positive", 138 / 200),
    ("pr_positive", 129 / 200),
    ("her2_positive", 51 / 200),
)
HCC_ALBI_P = (111 / 200, 77 / 200, 12 / 200)  # grade analogs 1/2/3
HCC_BCLC_P = (97 / 200, 74 / 200, 29 / 200)  # stages A/B/C
AG_GRADE_P = (0.2, 0.3, 0.5)  # WHO grade 2/3/4 mix (not tabulated; skewed to 4)

_TISSUE_LO, _TISSUE_HI = 0.5, 2.0


@dataclass
class CohortSpec:
    """Everything gen_cohort needs; defaults give a plausible AG cohort."""

    kind: str = "AG"
    n_patients: int = 1
    grid: tuple = (64, 64)
    spacing: float = 1.0
    seed: int = 0
    scan_days: tuple | None = None  # None -> per-kind schedule policy
    tau: float = 0.5
    obs_density_level: float = 0.8
    steps_per_day: int = 2
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.2
    lowpass_fraction: float = 0.8
    jitter_prob: float = 0.05
    tissue_contrast: float = 1.0  # 0 -> homogeneous tissue
    surgery_prob: float = 1.0
    rt_prob: float = 1.0
    chemo_prob: float = 1.0
    chemo_impulses: bool = False
    truth_params: BioParams | None = None  # None -> sampled per patient

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not (isinstance(self.n_patients, int) and self.n_patients >= 1):
            raise ConfigError(f"n_patients must be an int >= 1, got {self.n_patients}")
        h, w = self.grid
        if h < 32 or w < 32:
            raise ConfigError(f"grid must be at least 32x32, got {self.grid}")
        if self.spacing <= 0.0:
            raise ConfigError(f"spacing must be > 0, got {self.spacing}")
        if self.scan_days is not None:
            days = tuple(self.scan_days)
            if len(days) < 2 or any(b <= a for a, b in zip(days, days[1:])):
                raise ConfigError("scan_days must be >= 2 strictly increasing days")
        if not (0.0 < self.tau < 1.0):
            raise ConfigError(f"tau must be in (0, 1), got {self.tau}")
        if not (0.0 < self.obs_density_level <= 1.0):
            raise ConfigError("obs_density_level must be in (0, 1]")
        if self.noise_sigma < 0.0 or self.bias_amplitude < 0.0:
            raise ConfigError("noise_sigma and bias_amplitude must be >= 0")
        if not (0.0 < self.lowpass_fraction <= 1.0):
            raise ConfigError("lowpass_fraction must be in (0, 1]")
        for name in ("jitter_prob", "surgery_prob", "rt_prob", "chemo_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if not (0.0 <= self.tissue_contrast <= 1.0):
            raise ConfigError("tissue_contrast must be in [0, 1]")


@dataclass
class TissueMap:
    """Per-voxel positive multipliers on diffusion (m_d) and proliferation
    (m_k); values outside the domain are inert."""

    m_d: np.ndarray
    m_k: np.ndarray
    domain: DomainMask

    def __post_init__(self):
        for name, arr in (("m_d", self.m_d), ("m_k", self.m_k)):
            if arr.shape != self.domain.inside.shape:
                raise ValidationError(f"{name} shape {arr.shape} != domain shape")
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
                raise ValidationError(f"{name} must be finite and > 0")


@dataclass
class SyntheticPatient:
    record: PatientRecord
    truth: BioParams
    tissue: TissueMap
    areas: list = field(default_factory=list)
    diameters: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.record.observations)
        if len(self.areas) != n or len(self.diameters) != n:
            raise ValidationError("areas/diameters must align with observations")


def patient_seeds(cohort_seed: int, idx: int) -> dict:
    """Named per-purpose seed sequences, all derived from (cohort_seed, idx)."""
    children = np.random.SeedSequence([cohort_seed, idx]).spawn(6)
    names = ("phantom", "covariates", "timeline", "schedule", "truth", "render")
    return dict(zip(names, children))


# -------------------------------------------------------------------- phantoms


def _lobulated(rng, yy, xx, cy, cx, ry, rx, wobble=0.08):
    """Blob indicator: ellipse whose radius is modulated by low-order
    harmonics, giving a lobulated organ-like silhouette."""
    phi = np.arctan2((yy - cy) / ry, (xx - cx) / rx)
    rho = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    bound = np.ones_like(rho)
    for harmonic in (2, 3, 5):
        amp = rng.uniform(0.0, wobble)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        bound = bound + amp * np.cos(harmonic * phi + phase)
    return rho <= bound


def gen_phantom(kind: str, size: tuple, seed) -> tuple[DomainMask, TissueMap]:
    """Deterministic anatomy silhouette plus a two-tissue kinetics map.

    Multipliers land in [0.5, 2.0]. AG: head ellipse with a deep-tissue region
    of faster diffusion / slower proliferation; HCC: offset liver-ish blob;
    NAC: breast dome with a glandular high-proliferation subregion.
    """
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    h, w = size
    if h < 32 or w < 32:
        raise ConfigError(f"phantom needs at least 32x32, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    ny = 2.0 * yy / (h - 1) - 1.0
    nx = 2.0 * xx / (w - 1) - 1.0

    if kind == "AG":
        inside = _lobulated(rng, ny, nx, 0.0, 0.0, 0.82, 0.88, wobble=0.05)
        core = _lobulated(rng, ny, nx, 0.0, 0.0, 0.5, 0.55, wobble=0.1)
        m_d = np.where(core, 1.5, 0.7)
        m_k = np.where(core, 0.8, 1.3)
    elif kind == "HCC":
        inside = _lobulated(rng, ny, nx, -0.08, 0.1, 0.66, 0.82, wobble=0.09)
        core = _lobulated(rng, ny, nx, -0.05, 0.25, 0.34, 0.4, wobble=0.12)
        m_d = np.where(core, 1.3, 0.8)
        m_k = np.where(core, 1.2, 0.9)
    else:  # NAC
        rho = np.sqrt((ny - 1.05) ** 2 + nx**2)
        inside = rho <= 1.55
        gland = _lobulated(rng, ny, nx, 0.45, 0.0, 0.5, 0.55, wobble=0.1)
        m_d = np.where(gland, 0.7, 1.1)
        m_k = np.where(gland, 1.4, 0.9)

    m_d = np.clip(m_d, _TISSUE_LO, _TISSUE_HI)
    m_k = np.clip(m_k, _TISSUE_LO, _TISSUE_HI)
    domain = DomainMask(inside)
    return domain, TissueMap(m_d, m_k, domain)


# ------------------------------------------------------------------ covariates


def sample_covariates(kind: str, seed) -> Covariates:
    """Bernoulli marker draws at the cohort frequencies; age ~ U[30, 80]."""
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    rng = np.random.default_rng(seed)
    age = float(rng.uniform(30.0, 80.0))
    if kind == "AG":
        grade = int(rng.choice((2, 3, 4), p=AG_GRADE_P))
        markers = {name: int(rng.random() < p) for name, p in AG_MARKERS}
    elif kind == "HCC":
        albi = int(rng.choice((1, 2, 3), p=HCC_ALBI_P))
        grade = albi + 1  # reuse the 2/3/4 slot
        stage = int(rng.choice((0, 1, 2), p=HCC_BCLC_P))
        markers = {"bclc_b": int(stage == 1), "bclc_c": int(stage == 2)}
    else:
        grade = int(rng.choice((2, 3, 4)))
        markers = {name: int(rng.random() < p) for name, p in NAC_MARKERS}
    return Covariates(age_years=age, grade=grade, markers=markers)


# -------------------------------------------------------------------- timeline


def sample_timeline(kind: str, covariates: Covariates, seed,
                    surgery_prob: float = 1.0, rt_prob: float = 1.0,
                    chemo_prob: float = 1.0, impulses: bool = False) -> TreatmentTimeline:
    """Guideline-style event schedule for the cohort kind.

    AG: resection at s ~ U[5, 15]; 30 weekday 2 Gy fractions from s+14; a
    chemotherapy course starting with RT (7-day half-life decay, or weekly
    impulse courses when impulses=True). HCC and NAC branch the same rule
    table with their own offsets and fraction counts.
    """
    rng = np.random.default_rng(seed)
    # draw everything up front so the event mix never shifts the stream
    s_day = float(np.round(rng.uniform(5.0, 15.0), 1))
    resect = float(rng.uniform(0.85, 0.99))
    gates = rng.random(3)
    if kind == "AG":
        rt_start, n_fx, dose = s_day + 14.0, 30, 2.0
        chemo_start, half_life = rt_start, 7.0
    elif kind == "HCC":
        rt_start, n_fx, dose = s_day + 10.0, 5, 8.0
        chemo_start, half_life = s_day + 7.0, 30.0
    else:  # NAC: chemo first, then surgery, then adjuvant RT
        s_day = float(np.round(rng.uniform(80.0, 100.0), 1))
        rt_start, n_fx, dose = s_day + 21.0, 25, 2.0
        chemo_start, half_life = 3.0, 7.0

    surgeries = []
    if gates[0] < surgery_prob:
        surgeries.append(SurgeryEvent(day=s_day, mode="Mul", resect_fraction=resect))
    rt = []
    if gates[1] < rt_prob:
        offsets = [7 * wk + d for wk in range((n_fx + 4) // 5) for d in range(5)][:n_fx]
        rt = [RtFraction(day=rt_start + off, dose=dose) for off in offsets]
    chemo = []
    if gates[2] < chemo_prob:
        if impulses:
            weeks = max(1, n_fx // 5)
            chemo = [
                ChemoCourse(start_day=chemo_start + 7.0 * wk, amplitude=0.6,
                            decay_rate=math.log(2.0) / 2.0)
                for wk in range(weeks)
            ]
        else:
            chemo = [ChemoCourse(start_day=chemo_start, amplitude=1.0,
                                 decay_rate=math.log(2.0) / half_life)]
    return TreatmentTimeline(surgeries=surgeries, rt=rt, chemo=chemo)


def _sample_scan_days(kind: str, seed) -> tuple:
    rng = np.random.default_rng(seed)
    if kind == "AG":
        d1 = float(np.round(rng.uniform(70.0, 90.0), 0))
        d2 = float(np.round(rng.uniform(110.0, 140.0), 0))
    elif kind == "HCC":
        d1 = float(np.round(rng.uniform(30.0, 45.0), 0))
        d2 = float(np.round(rng.uniform(60.0, 90.0), 0))
    else:
        d1 = float(np.round(rng.uniform(105.0, 120.0), 0))
        d2 = float(np.round(rng.uniform(140.0, 170.0), 0))
    return (0.0, d1, d2)


def _sample_truth(kind: str, seed) -> BioParams:
    rng = np.random.default_rng(seed)

    def logu(lo, hi):
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    return BioParams(
        D=logu(0.05, 0.25),
        k=logu(0.04, 0.12),
        theta=1.0,
        alpha_ct=logu(0.01, 0.05),
        alpha_rt=logu(0.02, 0.05),
        beta_rt=logu(0.002, 0.005),
    )


# ------------------------------------------------------------------- rendering


def _jitter_mask(mask, inside, prob, rng):
    """Flip boundary-ring voxels with the given probability (acquisition
    variability); the result always stays inside the anatomy."""
    mask = mask & inside
    if prob <= 0.0 or not mask.any():
        return mask
    ring = (mask & ~erode_mask(mask, 1)) | (dilate_mask(mask, 1) & ~mask)
    flips = ring & (rng.random(mask.shape) < prob)
    return (mask ^ flips) & inside


def _render_image(values, tissue_m_d, inside, spec: CohortSpec, rng, theta=1.0):
    """Scan-like image: anatomy + tumor contrast, then bias field, k-space
    low-pass, and Rician noise (each skipped when its knob is neutral)."""
    img = np.where(inside, 0.4 + 0.15 * (tissue_m_d - 1.0), 0.05) + 0.45 * (values / theta)
    if spec.bias_amplitude > 0.0:
        h, w = img.shape
        ny = 2.0 * np.arange(h)[:, None] / (h - 1) - 1.0
        nx = 2.0 * np.arange(w)[None, :] / (w - 1) - 1.0
        c = rng.uniform(-spec.bias_amplitude, spec.bias_amplitude, size=5)
        img = img * (1.0 + c[0] * nx + c[1] * ny + c[2] * nx * ny + c[3] * nx**2 + c[4] * ny**2)
    if spec.lowpass_fraction < 1.0:
        spec_f = np.fft.fftshift(np.fft.fft2(img))
        h, w = img.shape
        ky = np.abs(np.arange(h) - h // 2) <= spec.lowpass_fraction * h / 2.0
        kx = np.abs(np.arange(w) - w // 2) <= spec.lowpass_fraction * w / 2.0
        spec_f *= ky[:, None] & kx[None, :]
        img = np.fft.ifft2(np.fft.ifftshift(spec_f)).real
    if spec.noise_sigma > 0.0:
        re = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        im = rng.normal(0.0, spec.noise_sigma, size=img.shape)
        img = np.hypot(re, im)  # magnitude -> Rician statistics
    return img


def feret_diameter(mask: np.ndarray, spacing: float) -> float:
    """Largest voxel-center distance across the mask (RECIST-like), in mm."""
    pts = np.argwhere(mask).astype(np.float64)
    if len(pts) < 2:
        return 0.0
    if len(pts) > 16:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except Exception:
            pass  # degenerate (collinear) masks: brute force below
    return float(pdist(pts).max()) * spacing


# ------------------------------------------------------------------ simulation


def simulate_and_render(spec: CohortSpec, idx: int) -> SyntheticPatient:
    """One patient: phantom -> covariates -> timeline -> ground-truth rollout
    with tissue-modulated kinetics -> rendered masks/images per scan day."""
    if not (0 <= idx):
        raise ConfigError(f"patient index must be >= 0, got {idx}")
    seeds = patient_seeds(spec.seed, idx)
    domain, tissue_raw = gen_phantom(spec.kind, spec.grid, seeds["phantom"])
    inside = domain.inside
    cov = sample_covariates(spec.kind, seeds["covariates"])
    tl = sample_timeline(
        spec.kind, cov, seeds["timeline"],
        surgery_prob=spec.surgery_prob, rt_prob=spec.rt_prob,
        chemo_prob=spec.chemo_prob, impulses=spec.chemo_impulses,
    )
    scan_days = spec.scan_days if spec.scan_days is not None else _sample_scan_days(
        spec.kind, seeds["schedule"]
    )
    truth = spec.truth_params if spec.truth_params is not None else _sample_truth(
        spec.kind, seeds["truth"]
    )

    c = spec.tissue_contrast
    m_d = np.clip(1.0 + c * (tissue_raw.m_d - 1.0), _TISSUE_LO, _TISSUE_HI)
    m_k = np.clip(1.0 + c * (tissue_raw.m_k - 1.0), _TISSUE_LO, _TISSUE_HI)
    tissue = TissueMap(m_d, m_k, domain)
    lap = LaplacianOperator(domain, spec.spacing, multiplier=m_d)
    cfg = RolloutConfig(
        steps_per_day=spec.steps_per_day,
        threshold_tau=spec.tau,
        obs_density_level=spec.obs_density_level,
    )
    rng = np.random.default_rng(seeds["render"])
    theta = truth.theta

    # seed lesion: Gaussian bump well inside the anatomy; the baseline mask is
    # its thresholded (jittered) footprint, and the trajectory then starts at
    # the calibration-consistent flat level on that mask
    margin = erode_mask(inside, 6)
    candidates = np.argwhere(margin if margin.any() else inside)
    cy, cx = candidates[rng.integers(len(candidates))]
    sigma = rng.uniform(1.8, 3.2)
    yy, xx = np.mgrid[0 : inside.shape[0], 0 : inside.shape[1]]
    bump = 0.9 * theta * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    mask0 = _jitter_mask(bump >= spec.tau * theta, inside, spec.jitter_prob, rng)
    if not mask0.any():
        mask0 = (bump >= spec.tau * theta) & inside

    values = np.where(mask0, spec.obs_density_level * theta, 0.0)
    state = TwinState(ScalarField(spec.spacing, values), scan_days[0])

    observations = []
    areas, diameters = [], []
    masks_fields = [(scan_days[0], state.field.values.copy(), mask0)]
    for day in scan_days[1:]:
        state = step_interval(state, day, truth, tl, lap, cfg, k_field=m_k)
        mask = _jitter_mask(
            state.field.values >= spec.tau * theta, inside, spec.jitter_prob, rng
        )
        masks_fields.append((day, state.field.values.copy(), mask))

    for day, vals, mask in masks_fields:
        image = _render_image(vals, m_d, inside, spec, rng, theta)
        observations.append(Observation(day=day, mask=mask, image=image))
        areas.append(float(mask.sum()) * spec.spacing**2)
        diameters.append(feret_diameter(mask, spec.spacing))

    record = PatientRecord(
        id=f"{spec.kind.lower()}-{idx:03d}",
        spacing=spec.spacing,
        domain=domain,
        covariates=cov,
        timeline=tl,
        observations=observations,
    )
    return SyntheticPatient(record=record, truth=truth, tissue=tissue,
                            areas=areas, diameters=diameters)


# ---------------------------------------------------------------- cohort on disk


def _spec_doc(spec: CohortSpec) -> dict:
    doc = {
        "kind": spec.kind,
        "n_patients": spec.n_patients,
        "grid": list(spec.grid),
        "spacing": spec.spacing,
        "seed": spec.seed,
        "scan_days": list(spec.scan_days) if spec.scan_days is not None else None,
        "tau": spec.tau,
        "obs_density_level": spec.obs_density_level,
        "steps_per_day": spec.steps_per_day,
        "noise_sigma": spec.noise_sigma,
        "bias_amplitude": spec.bias_amplitude,
        "lowpass_fraction": spec.lowpass_fraction,
        "jitter_prob": spec.jitter_prob,
        "tissue_contrast": spec.tissue_contrast,
        "surgery_prob": spec.surgery_prob,
        "rt_prob": spec.rt_prob,
        "chemo_prob": spec.chemo_prob,
        "chemo_impulses": spec.chemo_impulses,
        "truth_params": None,
    }
    if spec.truth_params is not None:
        p = spec.truth_params
        doc["truth_params"] = {
            "D": p.D, "k": p.k, "theta": p.theta,
            "alpha_ct": p.alpha_ct, "alpha_rt": p.alpha_rt, "beta_rt": p.beta_rt,
        }
    return doc


def gen_cohort(spec: CohortSpec, out_dir: str) -> dict:
    """Generate and persist a cohort; returns the stamped manifest document.

    Layout: out_dir/patients/<id>/patient.json (+ sidecars) and
    out_dir/cohort.json with per-file sha256 hashes and a manifest content
    hash, so regeneration with the same spec is byte-verifiable.
    """
    entries = []
    for idx in range(spec.n_patients):
        sp = simulate_and_render(spec, idx)
        pid = sp.record.id
        pdir = os.path.join(out_dir, "patients", pid)
        truth_doc = {
            "params": {
                "D": sp.truth.D, "k": sp.truth.k, "theta": sp.truth.theta,
                "alpha_ct": sp.truth.alpha_ct, "alpha_rt": sp.truth.alpha_rt,
                "beta_rt": sp.truth.beta_rt,
            },
            "areas": sp.areas,
            "diameters": sp.diameters,
            "tissue_md": "tissue_md.socf",
            "tissue_mk": "tissue_mk.socf",
            "patient_seed": [spec.seed, idx],
        }
        files = write_patient(os.path.join(pdir, "patient.json"), sp.record, truth=truth_doc)
        write_field(os.path.join(pdir, "tissue_md.socf"), ScalarField(spec.spacing, sp.tissue.m_d))
        write_field(os.path.join(pdir, "tissue_mk.socf"), ScalarField(spec.spacing, sp.tissue.m_k))
        files += ["tissue_md.socf", "tissue_mk.socf"]

        hashes = {}
        for rel in sorted(files):
            with open(os.path.join(pdir, rel), "rb") as f:
                hashes[rel] = sha256_hex(f.read())
        entries.append({
            "id": pid,
            "path": os.path.join("patients", pid, "patient.json"),
            "files": hashes,
        })

    manifest = {"spec": _spec_doc(spec), "patients": entries}
    write_manifest(os.path.join(out_dir, "cohort.json"), manifest)
    from .store import read_manifest

    return read_manifest(os.path.join(out_dir, "cohort.json"))
