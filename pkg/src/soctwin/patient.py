"""Patient records: the unit of simulation and calibration.

A record bundles the anatomy domain, covariates, the treatment timeline, and
dated tumor-mask observations. Observation masks are plain boolean arrays (a
post-resection scan can legitimately be empty, so they are not DomainMask).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import ShapeError, ValidationError
from .grid import DomainMask

if TYPE_CHECKING:
    from .personalize import Covariates
    from .therapy import TreatmentTimeline


@dataclass
class Observation:
    """One imaging timepoint: acquisition day and the segmented tumor mask.
    `image` optionally carries the rendered intensity image the mask came from."""

    day: float
    mask: np.ndarray
    image: np.ndarray | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ShapeError(f"observation mask must be 2D, got ndim={self.mask.ndim}")
        if not np.isfinite(self.day):
            raise ValidationError(f"observation day must be finite, got {self.day}")


@dataclass
class PatientRecord:
    id: str
    spacing: float
    domain: DomainMask
    covariates: "Covariates | None"
    timeline: "TreatmentTimeline"
    observations: list[Observation] = field(default_factory=list)

    def __post_init__(self):
        if not (self.spacing > 0.0 and np.isfinite(self.spacing)):
            raise ValidationError(f"spacing must be positive and finite, got {self.spacing}")
        days = [o.day for o in self.observations]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise ValidationError(f"observation days must be strictly increasing, got {days}")
        shape = self.domain.inside.shape
        for o in self.observations:
            if o.mask.shape != shape:
                raise ShapeError(
                    f"observation mask shape {o.mask.shape} != domain shape {shape}"
                )

    @property
    def scan_days(self) -> list[float]:
        return [o.day for o in self.observations]
