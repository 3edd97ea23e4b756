"""Calibration: Dice+BCE loss on soft-thresholded masks, exact reverse-mode
gradients through the recorded forward trajectory, and a log-space Adam fit.

Gradient layout, everywhere: [D, k, alpha_ct, alpha_rt, beta_rt] followed by
the flattened modulator weights (w1, b1, w2, b2) when a modulator is in play.

The reverse sweep walks the rollout tape backwards. Per record:

  riccati     voxelwise partials of the closed-form reaction flow w.r.t. its
              input and (a, b); a = k - kill chains kill into alpha_ct, and
              (a, b) chain into k. Voxels the [0, theta] clamp touched get
              subgradient 0.
  diffuse     the system (I - dt D L) is symmetric, so the transpose solve is
              the same CG solve; D picks up dt * omega . (L x_out).
  rt          nbar scales by the survival s; alpha/beta pick up the dose
              derivatives of s = exp(-alpha d - beta d^2).
  surgery     nbar scales by the stored multiplier field (the multiplier's own
              dependence on the pre-op mask is piecewise constant in the
              densities and carries no gradient).
  assimilate  nbar scales by the blend factor alpha.
  loss_point  injects the loss gradient taken at the recorded field.

Surgery modes that rebuild the multiplier from the evolving visible mask
(dynamic Mul, MorphOp, Rim) make the loss piecewise smooth; finite-difference
checks should use fixtures with explicit resection fields only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ShapeError, SolverError, StateError, ValidationError
from .grid import LaplacianOperator, ScalarField, cg_solve
from .imex import _SMALL_A, BioParams, RolloutConfig, rollout
from .patient import PatientRecord
from .personalize import ModulatorWeights, modulate, modulator_jacobian

PARAM_NAMES = ("D", "k", "alpha_ct", "alpha_rt", "beta_rt")
_PROB_CLIP = 1e-7  # BCE probability clamp


@dataclass
class LossConfig:
    """Mask-fit loss: dice_weight * (1 - softDice) + bce_weight * meanBCE.

    soft_temp is the smooth-threshold temperature in density units; None means
    0.05 * theta. eval_obs picks which observations are scored: "final" is the
    prediction target only, "all" averages every post-baseline observation
    (scored before assimilation touches it).
    """

    dice_weight: float = 1.0
    bce_weight: float = 1.0
    soft_temp: float | None = None
    eps: float = 1e-6
    eval_obs: str = "final"

    def __post_init__(self):
        if self.dice_weight < 0.0 or self.bce_weight < 0.0:
            raise ConfigError("loss weights must be nonnegative")
        if self.dice_weight + self.bce_weight <= 0.0:
            raise ConfigError("at least one loss weight must be positive")
        if self.soft_temp is not None and self.soft_temp <= 0.0:
            raise ConfigError(f"soft_temp must be > 0, got {self.soft_temp}")
        if self.eps <= 0.0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.eval_obs not in ("final", "all"):
            raise ConfigError(f"eval_obs must be 'final' or 'all', got {self.eval_obs!r}")

    def temperature(self, theta: float) -> float:
        return self.soft_temp if self.soft_temp is not None else 0.05 * theta


@dataclass
class OptimConfig:
    lr: float = 5e-2
    weights_lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    max_iters: int = 200
    seed: int = 0
    grad_check: bool = False

    def __post_init__(self):
        if self.lr <= 0.0 or self.weights_lr <= 0.0:
            raise ConfigError("learning rates must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1, beta2 must be in [0, 1)")
        if self.adam_eps <= 0.0 or self.clip_norm <= 0.0:
            raise ConfigError("adam_eps and clip_norm must be > 0")
        if not (isinstance(self.max_iters, int) and self.max_iters >= 0):
            raise ConfigError(f"max_iters must be an int >= 0, got {self.max_iters}")


@dataclass
class FitResult:
    params: BioParams
    weights: ModulatorWeights | None
    loss_history: list = field(default_factory=list)
    grad_check_report: float | None = None


# ------------------------------------------------------------------ mask loss


def soft_mask(pred: ScalarField, tau: float, theta: float, soft_temp: float) -> ScalarField:
    """Differentiable visibility: sigma((N - tau*theta) / soft_temp)."""
    if soft_temp <= 0.0:
        raise ConfigError(f"soft_temp must be > 0, got {soft_temp}")
    return ScalarField(pred.spacing, expit((pred.values - tau * theta) / soft_temp))


def _loss_value_grad(values, mask, inside, lc: LossConfig, tau, theta):
    """Scalar loss and its gradient w.r.t. the density field.

    Only voxels with inside=True participate; the returned gradient is zero
    elsewhere. mask is the observed tumor mask (bool).
    """
    temp = lc.temperature(theta)
    sel = inside
    p = expit((values[sel] - tau * theta) / temp)
    m = mask[sel].astype(np.float64)
    n = p.size
    if n == 0:
        raise ValidationError("loss needs at least one voxel inside the domain")

    a = 2.0 * float(p @ m) + lc.eps
    bden = float(np.sum(p)) + float(np.sum(m)) + lc.eps
    dice_term = 1.0 - a / bden

    ph = np.clip(p, _PROB_CLIP, 1.0 - _PROB_CLIP)
    bce = float(np.mean(-(m * np.log(ph) + (1.0 - m) * np.log1p(-ph))))

    total = lc.dice_weight * dice_term + lc.bce_weight * bce

    # d(1 - a/b)/dp_j = -(2 m_j b - a) / b^2
    dl_dp = lc.dice_weight * (-(2.0 * m * bden - a) / (bden * bden))
    unclipped = (p > _PROB_CLIP) & (p < 1.0 - _PROB_CLIP)
    dl_dp += lc.bce_weight * np.where(unclipped, -(m / ph - (1.0 - m) / (1.0 - ph)) / n, 0.0)
    dp_dn = p * (1.0 - p) / temp

    grad = np.zeros_like(values)
    grad[sel] = dl_dp * dp_dn
    return total, grad


def loss(pred: ScalarField, obs_mask: np.ndarray, lc: LossConfig, tau: float, theta: float,
         inside: np.ndarray | None = None) -> float:
    """Single-observation loss; inside=None scores every voxel."""
    mask = np.asarray(obs_mask, dtype=bool)
    if mask.shape != pred.values.shape:
        raise ShapeError(f"mask shape {mask.shape} != field shape {pred.values.shape}")
    if inside is None:
        inside = np.ones_like(mask)
    elif inside.shape != mask.shape:
        raise ShapeError(f"inside shape {inside.shape} != mask shape {mask.shape}")
    value, _ = _loss_value_grad(pred.values, mask, inside, lc, tau, theta)
    return value


# ------------------------------------------------------- objective over a tape


def _scored_indices(n_obs: int, lc: LossConfig) -> list[int]:
    if n_obs < 2:
        raise ValidationError("scoring needs at least one post-baseline observation")
    return [n_obs - 1] if lc.eval_obs == "final" else list(range(1, n_obs))


def _objective_from_tape(tape, patient: PatientRecord, params: BioParams,
                         cfg: RolloutConfig, lc: LossConfig, want_grads: bool):
    """Aggregate loss (mean over scored observations) and, when requested, the
    per-observation field gradients keyed by observation index."""
    scored = _scored_indices(len(patient.observations), lc)
    recorded = {rec[1]: rec[2] for rec in tape if rec[0] == "loss_point"}
    inside = patient.domain.inside
    total = 0.0
    grads = {}
    for i in scored:
        if i not in recorded:
            raise StateError(f"observation {i} missing from the recorded trajectory")
        li, gi = _loss_value_grad(
            recorded[i], patient.observations[i].mask, inside, lc, cfg.threshold_tau, params.theta
        )
        total += li / len(scored)
        if want_grads:
            grads[i] = gi / len(scored)
    return total, grads


def patient_loss(patient: PatientRecord, params: BioParams, cfg: RolloutConfig, lc: LossConfig,
                 weights: ModulatorWeights | None = None,
                 lap: LaplacianOperator | None = None) -> float:
    """Forward-only objective for one patient (modulated when weights given)."""
    p = params if weights is None else modulate(patient.covariates, weights, params)
    tape: list = []
    rollout(patient, p, cfg, lap=lap, tape=tape)
    value, _ = _objective_from_tape(tape, patient, p, cfg, lc, want_grads=False)
    return value


# -------------------------------------------------------------- reverse sweep


def _riccati_partials(x, k, theta, kill, dt):
    """Voxelwise partials of the reaction flow N(x; a, b) with a = k - kill,
    b = k / theta, matching the forward branch selection exactly."""
    a = k - kill
    b = k / theta
    if abs(a) < _SMALL_A:
        den = 1.0 + b * x * dt
        dndx = 1.0 / (den * den)
        dnda = x * dt * (1.0 + 0.5 * b * x * dt) / (den * den)
        dndb = -(x * x) * dt / (den * den)
    else:
        em1 = np.expm1(a * dt)
        e = em1 + 1.0
        v = b * x * em1 + a
        v2 = v * v
        dndx = (a * a) * e / v2
        dnda = (x * e * (1.0 + a * dt) * v - a * x * e * (b * x * dt * e + 1.0)) / v2
        dndb = -a * (x * x) * e * em1 / v2
    return dndx, dnda, dndb


def _dkill_dalpha(mode: str, c: float, rt_on: bool, tl) -> float:
    if mode == "Additive":
        return c
    if mode == "Saturation":
        return c / (1.0 + c / tl.saturation_half)
    return c * (1.0 + tl.synergy_gain * (1.0 if rt_on else 0.0))


def _reverse_sweep(tape, grads_by_obs, patient, params, cfg, lap):
    """Backpropagate the loss gradients through the tape; returns the gradient
    w.r.t. the (possibly modulated) scalars as a dict over PARAM_NAMES."""
    g = dict.fromkeys(PARAM_NAMES, 0.0)
    theta = params.theta
    mode = cfg.kill_mode if cfg.kill_mode is not None else patient.timeline.kill_mode
    nbar = np.zeros(patient.domain.inside.shape)
    systems: dict = {}

    for rec in reversed(tape):
        tag = rec[0]
        if tag == "loss_point":
            if rec[1] in grads_by_obs:
                nbar = nbar + grads_by_obs[rec[1]]
        elif tag == "assimilate":
            nbar = nbar * rec[1]
        elif tag == "surgery":
            nbar = nbar * rec[1]
        elif tag == "rt":
            _, dose, s, pre = rec
            w = float(np.sum(nbar * pre))
            g["alpha_rt"] += -dose * s * w
            g["beta_rt"] += -dose * dose * s * w
            nbar = nbar * s
        elif tag == "riccati":
            _, dt, x, kill, c, rt_on, clamped = rec
            dndx, dnda, dndb = _riccati_partials(x, params.k, theta, kill, dt)
            nb = np.where(clamped, 0.0, nbar)
            g["k"] += float(np.sum(nb * (dnda + dndb / theta)))
            dk_da = _dkill_dalpha(mode, c, rt_on, patient.timeline)
            if dk_da != 0.0:
                g["alpha_ct"] += -dk_da * float(np.sum(nb * dnda))
            nbar = nb * dndx
        elif tag == "diffuse":
            _, dt, x_out = rec
            if dt not in systems:
                systems[dt] = lap.implicit_system(dt * params.D)
            apply_a, diag = systems[dt]
            omega = cg_solve(apply_a, nbar, tol=cfg.cg_tol, max_iter=cfg.cg_max_iter, diag=diag)
            g["D"] += dt * float(np.sum(omega * lap.apply(x_out)))
            nbar = omega
        else:
            raise StateError(f"unknown tape record {tag!r}")
    return g


def grad_adjoint(patient: PatientRecord, params: BioParams, cfg: RolloutConfig, lc: LossConfig,
                 weights: ModulatorWeights | None = None,
                 lap: LaplacianOperator | None = None):
    """Objective and its exact reverse-mode gradient for one patient.

    Returns (loss, g) with g laid out as the five scalars followed by the
    flattened modulator weights when weights is not None. With a modulator the
    scalar block is the gradient w.r.t. the base (pre-modulation) parameters.
    """
    if lap is None:
        lap = LaplacianOperator(patient.domain, patient.spacing)
    if weights is not None:
        if min(params.D, params.k, params.alpha_ct) <= 0.0:
            raise ValidationError("modulated calibration needs strictly positive D, k, alpha_ct")
        p = modulate(patient.covariates, weights, params)
    else:
        p = params

    tape: list = []
    rollout(patient, p, cfg, lap=lap, tape=tape)
    value, grads_by_obs = _objective_from_tape(tape, patient, p, cfg, lc, want_grads=True)
    gd = _reverse_sweep(tape, grads_by_obs, patient, p, cfg, lap)
    g_mod = np.array([gd[name] for name in PARAM_NAMES])

    if weights is None:
        return value, g_mod

    # chain from the per-patient (modulated) scalars back to base + weights
    jac = modulator_jacobian(patient.covariates, weights, params)  # (3, n_params)
    g = np.zeros(5 + weights.n_params)
    mult = np.array([p.D / params.D, p.k / params.k, p.alpha_ct / params.alpha_ct])
    g[:3] = g_mod[:3] * mult
    g[3:5] = g_mod[3:5]
    g[5:] = jac.T @ g_mod[:3]
    return value, g


def grad_fd(patient: PatientRecord, params: BioParams, cfg: RolloutConfig, lc: LossConfig,
            weights: ModulatorWeights | None = None,
            lap: LaplacianOperator | None = None, rel_step: float = 1e-4):
    """Central-difference oracle for grad_adjoint (same layout). Slow:
    2 * n_params rollouts."""
    if lap is None:
        lap = LaplacianOperator(patient.domain, patient.spacing)
    theta = params.theta
    x0 = np.array([params.D, params.k, params.alpha_ct, params.alpha_rt, params.beta_rt])
    if weights is not None:
        x0 = np.concatenate([x0, weights.flatten()])

    def f(x):
        p = BioParams(D=x[0], k=x[1], theta=theta, alpha_ct=x[2], alpha_rt=x[3], beta_rt=x[4])
        if weights is not None:
            p = modulate(patient.covariates, weights.with_flat(x[5:]), p)
        tape: list = []
        rollout(patient, p, cfg, lap=lap, tape=tape)
        value, _ = _objective_from_tape(tape, patient, p, cfg, lc, want_grads=False)
        if not math.isfinite(value):
            raise SolverError(f"non-finite loss {value} during finite differencing")
        return value

    g = np.zeros_like(x0)
    for j in range(x0.size):
        h = rel_step * max(abs(x0[j]), rel_step)
        if j < 5 and x0[j] - h < 0.0:
            if x0[j] == 0.0:
                xp = x0.copy()
                xp[j] += h
                g[j] = (f(xp) - f(x0)) / h  # one-sided at the boundary
                continue
            h = 0.5 * x0[j]
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (f(xp) - f(xm)) / (2.0 * h)
    return f(x0), g


# ------------------------------------------------------------------------ fit


def _clip_global(g: np.ndarray, clip_norm: float) -> np.ndarray:
    nrm = float(np.linalg.norm(g))
    if nrm > clip_norm:
        return g * (clip_norm / nrm)
    return g


def fit(cohort: list, init: BioParams, oc: OptimConfig, lc: LossConfig, cfg: RolloutConfig,
        weights: ModulatorWeights | None = None) -> FitResult:
    """Adam on the mean cohort objective.

    The five scalars are optimized in log space (always strictly positive);
    modulator weights, when given, are optimized natively at weights_lr. The
    returned iterate is the best one visited, so the final loss never exceeds
    the initial loss. Deterministic.
    """
    if not cohort:
        raise ValidationError("fit needs a nonempty cohort")
    scalars0 = np.array([init.D, init.k, init.alpha_ct, init.alpha_rt, init.beta_rt])
    if np.any(scalars0 <= 0.0):
        raise ValidationError("log-space fit needs strictly positive initial scalars")
    theta = init.theta
    n_w = weights.n_params if weights is not None else 0
    laps = [LaplacianOperator(pt.domain, pt.spacing) for pt in cohort]

    x = np.concatenate([np.log(scalars0), weights.flatten() if weights is not None else np.zeros(0)])
    x_init = x.copy()
    lr_vec = np.concatenate([np.full(5, oc.lr), np.full(n_w, oc.weights_lr)])

    def unpack(xv):
        with np.errstate(over="ignore"):
            s = np.exp(xv[:5])
        if not np.all(np.isfinite(s)):
            raise SolverError("parameters overflowed the log-space map")
        p = BioParams(D=s[0], k=s[1], theta=theta, alpha_ct=s[2], alpha_rt=s[3], beta_rt=s[4])
        w = weights.with_flat(xv[5:]) if weights is not None else None
        return p, w

    def cohort_value_grad(xv):
        p, w = unpack(xv)
        total, g = 0.0, np.zeros_like(xv)
        for pt, lap in zip(cohort, laps):
            li, gi = grad_adjoint(pt, p, cfg, lc, weights=w, lap=lap)
            total += li / len(cohort)
            g += gi / len(cohort)
        g[:5] *= np.exp(xv[:5])  # d/d log(s) = s * d/ds
        return total, g

    m = np.zeros_like(x)
    v = np.zeros_like(x)
    history = []
    best_loss, best_x = math.inf, x.copy()
    check = None

    for t in range(oc.max_iters):
        try:
            value, g = cohort_value_grad(x)
        except SolverError as e:
            if e.iterations is None:
                raise SolverError(f"{e} (iteration {t})", residual=e.residual, iterations=t) from e
            raise
        if not math.isfinite(value):
            raise SolverError(f"loss diverged at iteration {t}: {value}", iterations=t)
        history.append(value)
        if value < best_loss:
            best_loss, best_x = value, x.copy()
        if oc.grad_check and t == 0:
            p0, w0 = unpack(x)
            _, ga = grad_adjoint(cohort[0], p0, cfg, lc, weights=w0, lap=laps[0])
            _, gf = grad_fd(cohort[0], p0, cfg, lc, weights=w0, lap=laps[0])
            denom = max(float(np.linalg.norm(gf)), 1e-30)
            check = float(np.linalg.norm(ga - gf)) / denom

        g = _clip_global(g, oc.clip_norm)
        m = oc.beta1 * m + (1.0 - oc.beta1) * g
        v = oc.beta2 * v + (1.0 - oc.beta2) * g * g
        mhat = m / (1.0 - oc.beta1 ** (t + 1))
        vhat = v / (1.0 - oc.beta2 ** (t + 1))
        x = x - lr_vec * mhat / (np.sqrt(vhat) + oc.adam_eps)

    try:
        p_final, w_final = unpack(x)
    except SolverError as e:
        raise SolverError(f"{e} (iteration {oc.max_iters})", iterations=oc.max_iters) from e
    final = 0.0
    for pt, lap in zip(cohort, laps):
        final += patient_loss(pt, p_final, cfg, lc, weights=w_final, lap=lap) / len(cohort)
    if not math.isfinite(final):
        raise SolverError(f"loss diverged at iteration {oc.max_iters}: {final}",
                          iterations=oc.max_iters)
    history.append(final)
    if final < best_loss:
        best_loss, best_x = final, x.copy()

    if np.array_equal(best_x, x_init):
        # exp(log(v)) is not bitwise v; hand back the caller's objects untouched
        params, w = init, weights
    else:
        params, w = unpack(best_x)
    return FitResult(params=params, weights=w, loss_history=history, grad_check_report=check)


def kfold_split(cohort, k: int, seed: int) -> list[tuple[list[int], list[int]]]:
    """Patient-wise K-fold partition: returns (train_indices, val_indices) per
    fold, disjoint and covering, deterministic for a given seed."""
    n = len(cohort) if not isinstance(cohort, int) else cohort
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValidationError(f"k={k} exceeds cohort size {n}")
    perm = np.random.default_rng(np.random.SeedSequence([seed])).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        val = sorted(int(j) for j in folds[i])
        train = sorted(int(j) for f in folds[:i] + folds[i + 1:] for j in f)
        out.append((train, val))
    return out
