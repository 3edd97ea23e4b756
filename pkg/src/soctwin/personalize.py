"""Covariate-driven parameter modulation.

A small fixed-architecture network maps patient covariates to three positive
multipliers applied to (D, k, alpha_ct):

    m = clamp(exp(W2' tanh(W1' z + b1) + b2), 0.25, 4.0)

The radiosensitivity parameters are deliberately left unmodulated. The feature
layout is frozen and versioned so stored weights stay interpretable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .imex import BioParams

FEATURE_LAYOUT_VERSION = "ag-v1"
# order is frozen: [age/100, grade one-hot(2,3,4), markers...]
MARKER_NAMES = (
    "mgmt_methylated",
    "idh_mutant",
    "codeleted_1p19q",
    "atrx_loss",
    "egfr_amplified",
)
N_FEATURES = 1 + 3 + len(MARKER_NAMES)
HIDDEN_WIDTH = 8
N_OUTPUTS = 3  # multipliers for (D, k, alpha_ct)
GRADES = (2, 3, 4)


@dataclass
class Covariates:
    """Patient covariates. markers maps flag name -> 0/1; flags outside the
    frozen feature layout are carried but encode to nothing."""

    age_years: float
    grade: int
    markers: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.age_years <= 120.0):
            raise ValidationError(f"age_years must be in (0, 120], got {self.age_years}")
        if self.grade not in GRADES:
            raise ValidationError(f"grade must be one of {GRADES}, got {self.grade}")
        for name, v in self.markers.items():
            if v not in (0, 1):
                raise ValidationError(f"marker {name!r} must be 0 or 1, got {v}")


def encode_features(z: Covariates) -> np.ndarray:
    """Frozen feature vector: [age/100, grade one-hot, markers in layout order];
    markers absent from the record encode as 0."""
    out = np.zeros(N_FEATURES)
    out[0] = z.age_years / 100.0
    out[1 + GRADES.index(z.grade)] = 1.0
    for i, name in enumerate(MARKER_NAMES):
        out[4 + i] = float(z.markers.get(name, 0))
    return out


@dataclass
class ModulatorWeights:
    w1: np.ndarray  # (N_FEATURES, HIDDEN_WIDTH)
    b1: np.ndarray  # (HIDDEN_WIDTH,)
    w2: np.ndarray  # (HIDDEN_WIDTH, N_OUTPUTS)
    b2: np.ndarray  # (N_OUTPUTS,)
    clamp_lo: float = 0.25
    clamp_hi: float = 4.0

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        want = [
            (self.w1, (N_FEATURES, HIDDEN_WIDTH)),
            (self.b1, (HIDDEN_WIDTH,)),
            (self.w2, (HIDDEN_WIDTH, N_OUTPUTS)),
            (self.b2, (N_OUTPUTS,)),
        ]
        for arr, shape in want:
            if arr.shape != shape:
                raise ShapeError(f"weight shape {arr.shape} != expected {shape}")
            if not np.isfinite(arr).all():
                raise ValidationError("weights must be finite")
        if not (0.0 < self.clamp_lo < self.clamp_hi):
            raise ValidationError(
                f"need 0 < clamp_lo < clamp_hi, got ({self.clamp_lo}, {self.clamp_hi})"
            )

    @classmethod
    def zeros(cls) -> "ModulatorWeights":
        return cls(
            np.zeros((N_FEATURES, HIDDEN_WIDTH)),
            np.zeros(HIDDEN_WIDTH),
            np.zeros((HIDDEN_WIDTH, N_OUTPUTS)),
            np.zeros(N_OUTPUTS),
        )

    @classmethod
    def random(cls, seed: int, scale: float = 0.1) -> "ModulatorWeights":
        rng = np.random.default_rng(seed)
        return cls(
            scale * rng.standard_normal((N_FEATURES, HIDDEN_WIDTH)),
            scale * rng.standard_normal(HIDDEN_WIDTH),
            scale * rng.standard_normal((HIDDEN_WIDTH, N_OUTPUTS)),
            scale * rng.standard_normal(N_OUTPUTS),
        )

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def with_flat(self, flat: np.ndarray) -> "ModulatorWeights":
        if flat.shape != (self.n_params,):
            raise ShapeError(f"flat weights shape {flat.shape} != ({self.n_params},)")
        i0 = self.w1.size
        i1 = i0 + self.b1.size
        i2 = i1 + self.w2.size
        return ModulatorWeights(
            flat[:i0].reshape(self.w1.shape),
            flat[i0:i1].copy(),
            flat[i1:i2].reshape(self.w2.shape),
            flat[i2:].copy(),
            clamp_lo=self.clamp_lo,
            clamp_hi=self.clamp_hi,
        )


def _forward(z: Covariates, w: ModulatorWeights):
    x = encode_features(z)
    h = np.tanh(x @ w.w1 + w.b1)
    u = h @ w.w2 + w.b2
    raw = np.exp(u)
    m = np.clip(raw, w.clamp_lo, w.clamp_hi)
    clamped = (raw < w.clamp_lo) | (raw > w.clamp_hi)
    return x, h, m, clamped


def modulate(z: Covariates, w: ModulatorWeights, base: BioParams) -> BioParams:
    """Personalized parameters: (D, k, alpha_ct) scaled by the covariate
    multipliers; theta and the radiosensitivity pair pass through."""
    _, _, m, _ = _forward(z, w)
    return BioParams(
        D=base.D * m[0],
        k=base.k * m[1],
        theta=base.theta,
        alpha_ct=base.alpha_ct * m[2],
        alpha_rt=base.alpha_rt,
        beta_rt=base.beta_rt,
    )


def modulator_jacobian(z: Covariates, w: ModulatorWeights, base: BioParams) -> np.ndarray:
    """Sensitivities of the modulated (D, k, alpha_ct) with respect to the
    flattened weights (order: w1, b1, w2, b2). Rows whose multiplier sits on a
    clamp are identically zero (clamp subgradient 0).
    """
    x, h, m, clamped = _forward(z, w)
    base_vec = np.array([base.D, base.k, base.alpha_ct])
    jac = np.zeros((N_OUTPUTS, w.n_params))
    i0 = w.w1.size
    i1 = i0 + w.b1.size
    i2 = i1 + w.w2.size
    sech2 = 1.0 - h * h  # tanh'
    for i in range(N_OUTPUTS):
        if clamped[i]:
            continue
        coef = base_vec[i] * m[i]
        # d u_i / d b2_j = delta_ij
        jac[i, i2 + i] = coef
        # d u_i / d W2[k, j] = delta_ij h_k
        dw2 = np.zeros_like(w.w2)
        dw2[:, i] = h
        jac[i, i1:i2] = coef * dw2.ravel()
        # back through the hidden layer
        db1 = w.w2[:, i] * sech2
        jac[i, i0:i1] = coef * db1
        jac[i, :i0] = coef * np.outer(x, db1).ravel()
    return jac
