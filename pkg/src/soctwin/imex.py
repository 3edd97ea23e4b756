"""Time integration of the treated growth model.

The continuous model on the anatomy domain is

    dN/dt = D lap(N) + k N (1 - N/theta) - kill(t) N

with homogeneous Neumann boundaries, plus instantaneous multiplicative jumps
for surgery and radiotherapy fractions. One sub-step splits the flow
(Lie-Trotter, diffusion first):

  1. implicit diffusion: solve (I - dt D L) Ntilde = N by preconditioned CG,
  2. reaction: the logistic-with-kill ODE has a closed-form (Riccati) solution
     which is applied voxelwise and exactly.

Both half-flows map [0, theta] into itself and are L2-stable, so the composed
step is unconditionally stable and bound preserving for any dt. Accuracy is
first order in dt and second order in dx.

Calendar handling: the span between consecutive jump events is integrated with
n = ceil(span * steps_per_day) equal sub-steps, so event times land exactly on
sub-step boundaries and the sub-step grid re-anchors after every event. The
chemotherapy exposure is frozen at each sub-step's left endpoint.

An explicit forward-Euler reference integrator with the same event handling is
provided for testing; it shares the jump-application code path, so event
multipliers are bitwise identical between the two integrators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StateError, ValidationError
from .grid import LaplacianOperator, ScalarField, cg_solve
from .patient import PatientRecord
from .therapy import (
    KILL_MODES,
    SURGERY_MODES,
    TreatmentTimeline,
    effective_kill_rate,
    rt_survival,
    surgery_multiplier,
)

# negatives closer to zero than this (times theta) are CG roundoff and are
# snapped to 0 by the implicit step
_NEG_SNAP = 1e-9
# below this |k - kill| the Riccati formula switches to its a -> 0 limit
_SMALL_A = 1e-12


@dataclass
class BioParams:
    """Biological rates. D in mm^2/day, k in 1/day, theta is the carrying
    capacity (cell density units), alpha_ct in 1/day per exposure unit,
    alpha_rt in 1/Gy, beta_rt in 1/Gy^2."""

    D: float
    k: float
    theta: float = 1.0
    alpha_ct: float = 0.0
    alpha_rt: float = 0.0
    beta_rt: float = 0.0

    def __post_init__(self):
        vals = (self.D, self.k, self.theta, self.alpha_ct, self.alpha_rt, self.beta_rt)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError(f"biological params must be finite, got {vals}")
        if self.D < 0.0 or self.k < 0.0 or self.alpha_ct < 0.0 or self.alpha_rt < 0.0 or self.beta_rt < 0.0:
            raise ValidationError("rates must be nonnegative")
        if self.theta <= 0.0:
            raise ValidationError(f"theta must be > 0, got {self.theta}")


@dataclass
class RolloutConfig:
    """Integrator and assimilation settings.

    kill_mode / surgery_mode, when set, override the timeline's own mode
    selections (useful for ablations); None keeps the timeline authoritative.
    """

    steps_per_day: int = 2
    assimilation_alpha: float = 0.5
    threshold_tau: float = 0.5
    obs_density_level: float = 1.0
    cg_tol: float = 1e-8
    cg_max_iter: int | None = None
    kill_mode: str | None = None
    surgery_mode: str | None = None

    def __post_init__(self):
        if not (isinstance(self.steps_per_day, int) and self.steps_per_day >= 1):
            raise ConfigError(f"steps_per_day must be an int >= 1, got {self.steps_per_day}")
        if not (0.0 <= self.assimilation_alpha <= 1.0):
            raise ConfigError(f"assimilation_alpha must be in [0, 1], got {self.assimilation_alpha}")
        if not (0.0 < self.threshold_tau < 1.0):
            raise ConfigError(f"threshold_tau must be in (0, 1), got {self.threshold_tau}")
        if not (0.0 < self.obs_density_level <= 1.0):
            raise ConfigError(f"obs_density_level must be in (0, 1], got {self.obs_density_level}")
        if self.cg_tol <= 0.0:
            raise ConfigError(f"cg_tol must be > 0, got {self.cg_tol}")
        if self.cg_max_iter is not None and self.cg_max_iter < 1:
            raise ConfigError(f"cg_max_iter must be >= 1, got {self.cg_max_iter}")
        if self.kill_mode is not None and self.kill_mode not in KILL_MODES:
            raise ConfigError(f"kill_mode override must be one of {KILL_MODES}")
        if self.surgery_mode is not None and self.surgery_mode not in SURGERY_MODES:
            raise ConfigError(f"surgery_mode override must be one of {SURGERY_MODES}")


@dataclass
class TwinState:
    """Field + calendar day."""

    field: ScalarField
    day: float

    def __post_init__(self):
        if not np.isfinite(self.day):
            raise ValidationError(f"state day must be finite, got {self.day}")


def threshold_mask(field: ScalarField, tau: float, theta: float) -> np.ndarray:
    """Visible tumor mask: density >= tau * theta."""
    return field.values >= tau * theta


def _riccati_values(n, k, theta, kill, dt):
    """Closed-form reaction flow on raw values.

    dN/dt = a N - b N^2 with a = k - kill, b = k / theta has the solution

        N(dt) = a N0 e^{a dt} / (b N0 (e^{a dt} - 1) + a)

    and the a -> 0 limit N0 / (1 + b N0 dt). k may be a scalar or a per-voxel
    array. Returns (clamped values, clamp mask) where the mask marks voxels
    the [0, theta] clamp actually modified.
    """
    a = np.asarray(k - kill, dtype=np.float64)
    b = np.asarray(k, dtype=np.float64) / theta
    small = np.abs(a) < _SMALL_A

    em1 = np.expm1(a * dt)
    denom = b * n * em1 + a
    denom = np.where(small, 1.0, denom)  # avoid 0/0; replaced below
    general = a * n * (em1 + 1.0) / denom
    limit = n / (1.0 + b * n * dt)
    raw = np.where(small, limit, general)

    clamped = (raw < 0.0) | (raw > theta)
    out = np.clip(raw, 0.0, theta)
    return out, clamped


def riccati_step(n: ScalarField, k, theta: float, kill_rate: float, dt: float) -> ScalarField:
    """Apply the exact reaction flow for one sub-step (kill frozen at its
    evaluation time). k may be a scalar or a per-voxel array."""
    if dt < 0.0:
        raise ConfigError(f"dt must be >= 0, got {dt}")
    if theta <= 0.0:
        raise ValidationError(f"theta must be > 0, got {theta}")
    out, _ = _riccati_values(n.values, k, theta, kill_rate, dt)
    return ScalarField(n.spacing, out)


def implicit_diffusion_step(
    n: ScalarField,
    diffusivity: float,
    dt: float,
    lap: LaplacianOperator,
    cfg: RolloutConfig,
    theta: float = 1.0,
) -> ScalarField:
    """Backward-Euler diffusion sub-step: solve (I - dt D L) x = N.

    The system matrix is an M-matrix, so the exact solve preserves
    nonnegativity; CG roundoff can leave negatives of order the solver
    tolerance, and anything in (-1e-9 * theta, 0) is snapped to 0.
    """
    if dt < 0.0 or diffusivity < 0.0:
        raise ConfigError("dt and diffusivity must be >= 0")
    apply_a, diag = lap.implicit_system(dt * diffusivity)
    x = cg_solve(apply_a, n.values, tol=cfg.cg_tol, max_iter=cfg.cg_max_iter, diag=diag)
    x[(x < 0.0) & (x > -_NEG_SNAP * theta)] = 0.0
    x[~lap.domain.inside] = 0.0
    return ScalarField(n.spacing, x)


def _apply_day_events(values, day, spacing, params, tl, cfg, tape):
    """Apply every jump event scheduled exactly at `day`, surgery before RT.

    Shared by the IMEX and explicit integrators so jump multipliers are
    bitwise identical between them.
    """
    for _ev_day, kind, ev in tl.events_at(day):
        if kind == "surgery":
            visible = values >= cfg.threshold_tau * params.theta
            m = surgery_multiplier(
                ScalarField(spacing, values), ev, visible, mode_override=cfg.surgery_mode
            )
            values = values * m
            if tape is not None:
                tape.append(("surgery", m))
        else:
            s = rt_survival(ev.dose, params.alpha_rt, params.beta_rt)
            if tape is not None:
                tape.append(("rt", ev.dose, s, values.copy()))
            values = values * s
    return values


def step_interval(
    state: TwinState,
    to_day: float,
    params: BioParams,
    tl: TreatmentTimeline,
    lap: LaplacianOperator,
    cfg: RolloutConfig,
    k_field: np.ndarray | None = None,
    tape: list | None = None,
) -> TwinState:
    """Advance the state to `to_day`, applying scheduled events on the way.

    Events with day in (state.day, to_day] are applied; an event exactly at
    state.day is considered already reflected in the state. Each event-free
    span is integrated with ceil(span * steps_per_day) equal sub-steps.

    k_field, when given, scales the proliferation rate per voxel (tissue
    modulation); it cannot be combined with tape recording.
    """
    if to_day < state.day:
        raise StateError(f"cannot step backwards: {state.day} -> {to_day}")
    if (state.field.height, state.field.width) != lap.shape:
        raise ConfigError("state field and Laplacian live on different grids")
    if k_field is not None and tape is not None:
        raise ConfigError("per-voxel k is not supported by the recording path")

    values = state.field.values.copy()
    spacing = state.field.spacing
    theta = params.theta
    k_eff = params.k if k_field is None else params.k * k_field

    event_days = sorted({d for d, _, _ in tl.jump_events(state.day, to_day)})
    breakpoints = event_days + ([to_day] if not event_days or event_days[-1] < to_day else [])

    t = state.day
    for stop in breakpoints:
        span = stop - t
        if span > 0.0:
            n_sub = max(1, math.ceil(span * cfg.steps_per_day - 1e-12))
            h = span / n_sub
            apply_a, diag = lap.implicit_system(h * params.D)
            for i in range(n_sub):
                t_sub = t + i * h
                x = cg_solve(apply_a, values, tol=cfg.cg_tol, max_iter=cfg.cg_max_iter, diag=diag)
                x[(x < 0.0) & (x > -_NEG_SNAP * theta)] = 0.0
                if tape is not None:
                    tape.append(("diffuse", h, x.copy()))
                kill = effective_kill_rate(
                    tl, params.alpha_ct, t_sub, rt_active=tl.rt_active(t_sub), kill_mode=cfg.kill_mode
                )
                out, clamped = _riccati_values(x, k_eff, theta, kill, h)
                if tape is not None:
                    c = sum(
                        co.amplitude * math.exp(-co.decay_rate * (t_sub - co.start_day))
                        for co in tl.chemo
                        if t_sub >= co.start_day
                    )
                    tape.append(("riccati", h, x, kill, c, tl.rt_active(t_sub), clamped))
                values = out
            t = stop
        if stop in event_days:
            values = _apply_day_events(values, stop, spacing, params, tl, cfg, tape)

    return TwinState(ScalarField(spacing, values), to_day)


def rollout(
    patient: PatientRecord,
    params: BioParams,
    cfg: RolloutConfig,
    lap: LaplacianOperator | None = None,
    k_field: np.ndarray | None = None,
    tape: list | None = None,
) -> list[tuple[float, ScalarField]]:
    """Simulate a patient across their observation days.

    The state is initialized from the first observation as
    obs_density_level * theta on the observed mask (intersected with the
    anatomy domain). At every intermediate observation the state is nudged
    toward the observed mask:

        u <- alpha * u + (1 - alpha) * u_obs

    The final observation is the prediction target and is never assimilated.
    Returns [(day, field)] for every observation day; intermediate entries are
    post-assimilation.
    """
    if not patient.observations:
        raise ValidationError("rollout needs at least one observation")
    if lap is None:
        lap = LaplacianOperator(patient.domain, patient.spacing)
    inside = patient.domain.inside
    theta = params.theta
    level = cfg.obs_density_level * theta

    def obs_field(mask):
        return np.where(mask & inside, level, 0.0)

    obs = patient.observations
    values = obs_field(obs[0].mask)
    state = TwinState(ScalarField(patient.spacing, values), obs[0].day)
    results = [(obs[0].day, state.field.copy())]

    for i in range(1, len(obs)):
        state = step_interval(state, obs[i].day, params, patient.timeline, lap, cfg, k_field, tape)
        if tape is not None:
            tape.append(("loss_point", i, state.field.values.copy()))
        if i < len(obs) - 1:
            blended = (
                cfg.assimilation_alpha * state.field.values
                + (1.0 - cfg.assimilation_alpha) * obs_field(obs[i].mask)
            )
            if tape is not None:
                tape.append(("assimilate", cfg.assimilation_alpha))
            state = TwinState(ScalarField(patient.spacing, blended), obs[i].day)
        results.append((obs[i].day, state.field.copy()))

    return results


def predict_curve(
    patient: PatientRecord,
    params: BioParams,
    cfg: RolloutConfig,
    horizon: float | None = None,
    lap: LaplacianOperator | None = None,
    k_field: np.ndarray | None = None,
    sample_every: float = 1.0,
) -> list[tuple[float, ScalarField]]:
    """Densely sampled trajectory: rollout semantics, but the field is
    recorded at every sample_every days (plus every observation day and the
    horizon), not just at scans.

    Assimilation matches rollout exactly: intermediate observations are
    blended with weight assimilation_alpha, the final observation never is,
    even when the horizon extends past it. horizon defaults to the last
    observation day and may not precede it.
    """
    if not patient.observations:
        raise ValidationError("predict_curve needs at least one observation")
    if sample_every <= 0.0:
        raise ConfigError(f"sample_every must be > 0, got {sample_every}")
    obs = patient.observations
    last = obs[-1].day
    if horizon is None:
        horizon = last
    if horizon < last:
        raise ValidationError(f"horizon {horizon} precedes last observation day {last}")
    if lap is None:
        lap = LaplacianOperator(patient.domain, patient.spacing)
    inside = patient.domain.inside
    level = cfg.obs_density_level * params.theta

    day0 = obs[0].day
    days = set(np.arange(day0, horizon + 1e-9, sample_every).tolist())
    days.update(o.day for o in obs)
    days.add(horizon)
    days = sorted(days)

    assim_at = {o.day: o for o in obs[1:-1]}
    values = np.where(obs[0].mask & inside, level, 0.0)
    state = TwinState(ScalarField(patient.spacing, values), day0)
    out = [(day0, state.field.copy())]
    for day in days[1:]:
        state = step_interval(state, day, params, patient.timeline, lap, cfg, k_field)
        if day in assim_at:
            blended = cfg.assimilation_alpha * state.field.values + (
                1.0 - cfg.assimilation_alpha
            ) * np.where(assim_at[day].mask & inside, level, 0.0)
            state = TwinState(ScalarField(patient.spacing, blended), day)
        out.append((day, state.field.copy()))
    return out


def stability_limit(lap: LaplacianOperator, diffusivity: float) -> float:
    """Largest forward-Euler diffusion step: 0.9 * dx^2 / (4 D_max), where
    D_max accounts for the operator's tissue multiplier map if present."""
    w_max = 1.0
    if lap.w_v.size or lap.w_h.size:
        w_max = max(
            float(lap.w_v.max()) if lap.w_v.size else 0.0,
            float(lap.w_h.max()) if lap.w_h.size else 0.0,
            1e-300,
        )
    d_eff = diffusivity * w_max
    if d_eff == 0.0:
        return math.inf
    return 0.9 * lap.spacing**2 / (4.0 * d_eff)


def explicit_oracle_rollout(
    state: TwinState,
    to_day: float,
    params: BioParams,
    tl: TreatmentTimeline,
    lap: LaplacianOperator,
    cfg: RolloutConfig,
    dt: float,
    k_field: np.ndarray | None = None,
) -> TwinState:
    """Forward-Euler reference integrator with the same event handling as
    step_interval. Raises ConfigError when dt exceeds the diffusion stability
    bound 0.9 dx^2 / (4 D). Unclamped by design: it is a convergence oracle,
    and clamping would hide divergence."""
    if to_day < state.day:
        raise StateError(f"cannot step backwards: {state.day} -> {to_day}")
    if dt <= 0.0:
        raise ConfigError(f"dt must be > 0, got {dt}")
    limit = stability_limit(lap, params.D)
    if dt > limit:
        raise ConfigError(f"explicit dt {dt} above stability bound {limit:.6g}")

    values = state.field.values.copy()
    spacing = state.field.spacing
    theta = params.theta
    k_eff = params.k if k_field is None else params.k * k_field

    event_days = sorted({d for d, _, _ in tl.jump_events(state.day, to_day)})
    breakpoints = event_days + ([to_day] if not event_days or event_days[-1] < to_day else [])

    t = state.day
    for stop in breakpoints:
        span = stop - t
        if span > 0.0:
            n_sub = max(1, math.ceil(span / dt - 1e-12))
            h = span / n_sub
            for i in range(n_sub):
                t_sub = t + i * h
                kill = effective_kill_rate(
                    tl, params.alpha_ct, t_sub, rt_active=tl.rt_active(t_sub), kill_mode=cfg.kill_mode
                )
                rhs = params.D * lap.apply(values) + k_eff * values * (1.0 - values / theta) - kill * values
                values = values + h * rhs
            t = stop
        if stop in event_days:
            values = _apply_day_events(values, stop, spacing, params, tl, cfg, None)

    return TwinState(ScalarField(spacing, values), to_day)
