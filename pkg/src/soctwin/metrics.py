"""Evaluation metrics: overlap, volumes, progression timing, scalar errors.

Masks are plain 2D boolean arrays; volume curves are (day, volume) sequences
sorted by day.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError, ValidationError


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice coefficient 2|A and B| / (|A| + |B|); two empty masks count as a
    perfect match (1.0)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def mask_volume(mask: np.ndarray, spacing: float) -> float:
    """Area of the mask in mm^2: voxel count times spacing^2."""
    if spacing <= 0.0:
        raise ValidationError(f"spacing must be > 0, got {spacing}")
    return float(np.asarray(mask, dtype=bool).sum()) * spacing * spacing


def time_to_progression(
    curve: list[tuple[float, float]],
    factor: float = 1.25,
    min_abs_increase: float = 0.0,
) -> float | None:
    """First day the volume exceeds the running post-nadir minimum by the
    progression rule: v >= factor * nadir AND v - nadir >= min_abs_increase.

    The nadir is the minimum over all strictly earlier points, so the baseline
    itself can never progress. Callers typically pass 2 voxel areas as the
    absolute increase to suppress single-voxel flicker. Returns None when no
    point qualifies.
    """
    if factor <= 1.0:
        raise ValidationError(f"progression factor must be > 1, got {factor}")
    days = [d for d, _ in curve]
    if any(b <= a for a, b in zip(days, days[1:])):
        raise ValidationError("volume curve days must be strictly increasing")
    if any(v < 0 for _, v in curve):
        raise ValidationError("volumes must be nonnegative")
    nadir = math.inf
    for i, (day, v) in enumerate(curve):
        if i > 0 and v >= factor * nadir and (v - nadir) >= min_abs_increase and v > nadir:
            return day
        nadir = min(nadir, v)
    return None


def mae_rmse(pairs: list[tuple[float, float]]) -> tuple[float, float]:
    """Mean absolute and root-mean-square error over (truth, prediction) pairs."""
    if not pairs:
        raise ValidationError("mae_rmse needs at least one pair")
    diffs = np.array([a - b for a, b in pairs], dtype=np.float64)
    return float(np.abs(diffs).mean()), float(np.sqrt((diffs**2).mean()))
