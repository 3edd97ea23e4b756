"""Treatment model: chemotherapy exposure curves, radiotherapy fractions, and
surgical resection operators, bundled into a per-patient timeline.

Chemo acts continuously through the reaction term (an exponentially decaying
exposure per course); surgery and radiotherapy are instantaneous jumps applied
between integration sub-steps. All jump operators are voxelwise multipliers in
[0, 1], so they can never push a density outside [0, theta] or increase it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError, ValidationError
from .grid import ScalarField

SURGERY_MODES = ("Mul", "MorphOp", "Rim")
KILL_MODES = ("Additive", "Saturation", "Synergy")

# 3x3 ones = Chebyshev unit ball; r iterations dilate by a radius-r square
_CHEBYSHEV = np.ones((3, 3), dtype=bool)


@dataclass
class ChemoCourse:
    """One systemic therapy course: exposure amplitude * exp(-decay * (t - start))
    for t >= start. decay_rate 0 means a constant step exposure."""

    start_day: float
    amplitude: float
    decay_rate: float
    kind: str = "chemo"

    def __post_init__(self):
        if not np.isfinite(self.start_day):
            raise ValidationError(f"chemo start_day must be finite, got {self.start_day}")
        if not (self.amplitude >= 0.0 and np.isfinite(self.amplitude)):
            raise ValidationError(f"chemo amplitude must be >= 0, got {self.amplitude}")
        if not (self.decay_rate >= 0.0 and np.isfinite(self.decay_rate)):
            raise ValidationError(f"chemo decay_rate must be >= 0, got {self.decay_rate}")


@dataclass
class RtFraction:
    """A single radiotherapy fraction delivered instantaneously on a day."""

    day: float
    dose: float

    def __post_init__(self):
        if not np.isfinite(self.day):
            raise ValidationError(f"rt day must be finite, got {self.day}")
        if not (self.dose > 0.0 and np.isfinite(self.dose)):
            raise ValidationError(f"rt dose must be > 0, got {self.dose}")


@dataclass
class SurgeryEvent:
    """Resection event.

    Mul: multiply density by (1 - R). When `resection` is an explicit field it
    is used as R (values in [0, 1], shape of the grid). When it is None, R is
    materialized at event time as resect_fraction on the visible tumor mask
    (density >= tau * theta), which models resecting what is seen on imaging.

    MorphOp: clear the visible tumor mask dilated by `erosion_radius`
    (Chebyshev metric), i.e. mask plus a safety margin.

    Rim: clear the visible tumor mask dilated by `rim_width`; parameterized
    separately because protocols quote rim widths, but the cleared region is
    the same dilation construction.
    """

    day: float
    mode: str = "Mul"
    resection: ScalarField | None = None
    resect_fraction: float = 1.0
    erosion_radius: int = 0
    rim_width: int = 0

    def __post_init__(self):
        if not np.isfinite(self.day):
            raise ValidationError(f"surgery day must be finite, got {self.day}")
        if self.mode not in SURGERY_MODES:
            raise ValidationError(f"surgery mode must be one of {SURGERY_MODES}, got {self.mode!r}")
        if not (0.0 <= self.resect_fraction <= 1.0):
            raise ValidationError(f"resect_fraction must be in [0, 1], got {self.resect_fraction}")
        if self.erosion_radius < 0 or self.rim_width < 0:
            raise ValidationError("erosion_radius and rim_width must be >= 0")
        if self.resection is not None:
            v = self.resection.values
            if (v < 0.0).any() or (v > 1.0).any():
                raise ValidationError("resection field values must lie in [0, 1]")


@dataclass
class TreatmentTimeline:
    """All treatment for one patient. Event lists must be sorted by day."""

    surgeries: list[SurgeryEvent] = field(default_factory=list)
    rt: list[RtFraction] = field(default_factory=list)
    chemo: list[ChemoCourse] = field(default_factory=list)
    kill_mode: str = "Additive"
    synergy_gain: float = 0.0
    saturation_half: float = 1.0

    def __post_init__(self):
        if self.kill_mode not in KILL_MODES:
            raise ValidationError(f"kill_mode must be one of {KILL_MODES}, got {self.kill_mode!r}")
        if not (self.synergy_gain >= 0.0 and np.isfinite(self.synergy_gain)):
            raise ValidationError(f"synergy_gain must be >= 0, got {self.synergy_gain}")
        if not (self.saturation_half > 0.0 and np.isfinite(self.saturation_half)):
            raise ValidationError(f"saturation_half must be > 0, got {self.saturation_half}")
        for name, events in (("surgeries", self.surgeries), ("rt", self.rt)):
            days = [e.day for e in events]
            if any(b < a for a, b in zip(days, days[1:])):
                raise ValidationError(f"{name} must be sorted by day")
        starts = [c.start_day for c in self.chemo]
        if any(b < a for a, b in zip(starts, starts[1:])):
            raise ValidationError("chemo courses must be sorted by start_day")

    def rt_window(self) -> tuple[float, float] | None:
        if not self.rt:
            return None
        return (self.rt[0].day, self.rt[-1].day)

    def rt_active(self, t: float) -> bool:
        """True while a radiotherapy course is underway (first to last fraction,
        inclusive); used by the Synergy kill mode."""
        w = self.rt_window()
        return w is not None and w[0] <= t <= w[1]

    def jump_events(self, after: float, through: float) -> list[tuple[float, str, object]]:
        """Instantaneous events with day in (after, through], ordered by day;
        same-day surgery precedes radiotherapy."""
        out = []
        for ev in self.surgeries:
            if after < ev.day <= through:
                out.append((ev.day, "surgery", ev))
        for fr in self.rt:
            if after < fr.day <= through:
                out.append((fr.day, "rt", fr))
        out.sort(key=lambda e: (e[0], 0 if e[1] == "surgery" else 1))
        return out

    def events_at(self, day: float) -> list[tuple[float, str, object]]:
        """Events scheduled exactly on `day`, surgery first."""
        out = [(ev.day, "surgery", ev) for ev in self.surgeries if ev.day == day]
        out += [(fr.day, "rt", fr) for fr in self.rt if fr.day == day]
        return out


def chemo_exposure(tl: TreatmentTimeline, t: float) -> float:
    """Total systemic exposure C(t): sum over started courses of
    amplitude * exp(-decay_rate * (t - start_day))."""
    total = 0.0
    for c in tl.chemo:
        if t >= c.start_day:
            total += c.amplitude * math.exp(-c.decay_rate * (t - c.start_day))
    return total


def effective_kill_rate(
    tl: TreatmentTimeline,
    alpha_ct: float,
    t: float,
    rt_active: bool | None = None,
    kill_mode: str | None = None,
) -> float:
    """Chemotherapy kill rate entering the reaction term at time t.

    Additive:    alpha_ct * C
    Saturation:  alpha_ct * C / (1 + C / saturation_half)
    Synergy:     alpha_ct * C * (1 + synergy_gain * [rt underway])

    rt_active defaults to the timeline's own radiotherapy window; kill_mode
    defaults to the timeline's configured mode.
    """
    mode = tl.kill_mode if kill_mode is None else kill_mode
    if mode not in KILL_MODES:
        raise ValidationError(f"kill_mode must be one of {KILL_MODES}, got {mode!r}")
    c = chemo_exposure(tl, t)
    if mode == "Additive":
        return alpha_ct * c
    if mode == "Saturation":
        return alpha_ct * c / (1.0 + c / tl.saturation_half)
    active = tl.rt_active(t) if rt_active is None else rt_active
    return alpha_ct * c * (1.0 + tl.synergy_gain * (1.0 if active else 0.0))


def rt_survival(dose: float, alpha_rt: float, beta_rt: float) -> float:
    """Linear-quadratic surviving fraction exp(-alpha*d - beta*d^2)."""
    if not (dose >= 0.0 and np.isfinite(dose)):
        raise ValidationError(f"dose must be >= 0, got {dose}")
    if alpha_rt < 0.0 or beta_rt < 0.0:
        raise ValidationError("alpha_rt and beta_rt must be >= 0")
    return math.exp(-(alpha_rt * dose + beta_rt * dose * dose))


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev dilation by `radius` voxels (3x3 ones iterated)."""
    if radius < 0:
        raise ValidationError(f"radius must be >= 0, got {radius}")
    if radius == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=_CHEBYSHEV, iterations=radius)


def erode_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev erosion by `radius` voxels."""
    if radius < 0:
        raise ValidationError(f"radius must be >= 0, got {radius}")
    if radius == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=_CHEBYSHEV, iterations=radius)


def surgery_multiplier(
    n: ScalarField,
    ev: SurgeryEvent,
    tumor_mask: np.ndarray,
    mode_override: str | None = None,
) -> np.ndarray:
    """The voxelwise multiplier M in [0, 1] applied by a resection event.

    tumor_mask is the visible tumor (density >= tau * theta) at event time;
    it can be empty, in which case the morphological modes and the dynamic
    Mul mode reduce to the identity.
    """
    mode = ev.mode if mode_override is None else mode_override
    if mode not in SURGERY_MODES:
        raise ValidationError(f"surgery mode must be one of {SURGERY_MODES}, got {mode!r}")
    if tumor_mask.shape != n.values.shape:
        raise ShapeError(f"tumor mask shape {tumor_mask.shape} != field shape {n.values.shape}")

    if mode == "Mul":
        if ev.resection is not None:
            if ev.resection.values.shape != n.values.shape:
                raise ShapeError(
                    f"resection shape {ev.resection.values.shape} != field shape {n.values.shape}"
                )
            return 1.0 - ev.resection.values
        m = np.ones_like(n.values)
        m[tumor_mask] = 1.0 - ev.resect_fraction
        return m

    radius = ev.erosion_radius if mode == "MorphOp" else ev.rim_width
    cleared = dilate_mask(tumor_mask, radius)
    m = np.ones_like(n.values)
    m[cleared] = 0.0
    return m


def apply_surgery(
    n: ScalarField,
    ev: SurgeryEvent,
    tumor_mask: np.ndarray,
    mode_override: str | None = None,
) -> ScalarField:
    """Apply a resection jump: componentwise multiply by the event's multiplier.
    Output never exceeds the input."""
    m = surgery_multiplier(n, ev, tumor_mask, mode_override)
    return ScalarField(n.spacing, n.values * m)


def apply_rt_fraction(n: ScalarField, fr: RtFraction, alpha_rt: float, beta_rt: float) -> ScalarField:
    """Apply one radiotherapy fraction: uniform multiply by the surviving
    fraction exp(-alpha*d - beta*d^2)."""
    s = rt_survival(fr.dose, alpha_rt, beta_rt)
    return ScalarField(n.spacing, n.values * s)
