"""Regular 2D grid primitives: fields, domain masks, the masked Neumann
Laplacian, and a matrix-free preconditioned conjugate-gradient solver.

Conventions used everywhere in this package:

* arrays are float64, C-order, shape (height, width); row-major flattening is
  the canonical linear ordering,
* a voxel is "inside" when the anatomy mask is set; everything outside the
  mask is held at exactly 0 and never participates in the stencil,
* the Laplacian uses the 5-point stencil with mirror (ghost cell) boundary
  handling at the mask edge, which keeps the operator symmetric and makes
  homogeneous Neumann the effective boundary condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, SolverError, ValidationError


@dataclass
class ScalarField:
    """A scalar quantity sampled on the grid (tumor cell density, an image...).

    values has shape (height, width); spacing is the isotropic voxel edge
    length in mm.
    """

    spacing: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"field values must be 2D, got ndim={self.values.ndim}")
        if self.values.size == 0:
            raise ShapeError("field must have at least one voxel")
        if not (self.spacing > 0.0 and np.isfinite(self.spacing)):
            raise ValidationError(f"spacing must be positive and finite, got {self.spacing}")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def validate_finite(self):
        if not np.isfinite(self.values).all():
            raise ValidationError("field contains non-finite values")

    def copy(self) -> "ScalarField":
        return ScalarField(self.spacing, self.values.copy())


@dataclass
class DomainMask:
    """Anatomy mask: True where tissue exists. Must be non-empty."""

    inside: np.ndarray

    def __post_init__(self):
        self.inside = np.asarray(self.inside, dtype=bool)
        if self.inside.ndim != 2:
            raise ShapeError(f"mask must be 2D, got ndim={self.inside.ndim}")
        if not self.inside.any():
            raise ValidationError("domain mask has no inside voxels")

    @property
    def width(self) -> int:
        return self.inside.shape[1]

    @property
    def height(self) -> int:
        return self.inside.shape[0]

    @property
    def n_inside(self) -> int:
        return int(self.inside.sum())


class LaplacianOperator:
    """Matrix-free masked 5-point Laplacian with mirror Neumann boundaries.

    The stencil is stored as per-face weights: a face between two inside
    voxels has weight 1 (times the mean of an optional per-voxel diffusivity
    multiplier map); faces crossing the mask edge have weight 0, which is the
    mirror/ghost-cell Neumann closure. Application computes

        (L u)_i = sum_faces w_f (u_j - u_i) / dx^2

    so the operator is symmetric, negative semidefinite, annihilates constants
    on connected components, and returns exactly 0 outside the mask.
    """

    def __init__(self, domain: DomainMask, spacing: float, multiplier: np.ndarray | None = None):
        if not (spacing > 0.0 and np.isfinite(spacing)):
            raise ValidationError(f"spacing must be positive and finite, got {spacing}")
        inside = domain.inside
        self.domain = domain
        self.spacing = float(spacing)
        self.inv_h2 = 1.0 / (self.spacing * self.spacing)

        w_v = (inside[:-1, :] & inside[1:, :]).astype(np.float64)
        w_h = (inside[:, :-1] & inside[:, 1:]).astype(np.float64)
        if multiplier is not None:
            m = np.asarray(multiplier, dtype=np.float64)
            if m.shape != inside.shape:
                raise ShapeError(f"multiplier shape {m.shape} != mask shape {inside.shape}")
            if (m <= 0.0).any() or not np.isfinite(m).all():
                raise ValidationError("diffusivity multiplier must be positive and finite")
            # face weight = arithmetic mean of the two endpoint multipliers
            w_v *= 0.5 * (m[:-1, :] + m[1:, :])
            w_h *= 0.5 * (m[:, :-1] + m[:, 1:])
        self.w_v = w_v
        self.w_h = w_h

        deg = np.zeros(inside.shape, dtype=np.float64)
        deg[:-1, :] += w_v
        deg[1:, :] += w_v
        deg[:, :-1] += w_h
        deg[:, 1:] += w_h
        # row sum of off-diagonal weights, already divided by dx^2; this is
        # what the Jacobi preconditioner for (I - dt D L) needs
        self.degree_over_h2 = deg * self.inv_h2

    @property
    def shape(self) -> tuple[int, int]:
        return self.domain.inside.shape

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Apply the stencil to a raw (height, width) array."""
        if u.shape != self.shape:
            raise ShapeError(f"field shape {u.shape} != operator shape {self.shape}")
        out = np.zeros_like(u)
        d_v = (u[:-1, :] - u[1:, :]) * self.w_v
        out[:-1, :] -= d_v
        out[1:, :] += d_v
        d_h = (u[:, :-1] - u[:, 1:]) * self.w_h
        out[:, :-1] -= d_h
        out[:, 1:] += d_h
        out *= self.inv_h2
        return out

    def implicit_system(self, dt_d: float):
        """Return (apply_A, jacobi_diag) for A = I - dt*D*L.

        dt_d is the product of the sub-step length and the diffusivity. A is
        symmetric positive definite for dt_d >= 0; the diagonal is
        1 + dt_d * degree / dx^2.
        """
        if dt_d < 0.0:
            raise ConfigError(f"dt*D must be nonnegative, got {dt_d}")

        def apply_a(u: np.ndarray) -> np.ndarray:
            return u - dt_d * self.apply(u)

        diag = 1.0 + dt_d * self.degree_over_h2
        return apply_a, diag


def apply_laplacian(op: LaplacianOperator, u: ScalarField) -> ScalarField:
    """Apply the masked Laplacian to a field; result is 0 outside the mask."""
    if (u.height, u.width) != op.shape:
        raise ShapeError(f"field shape {(u.height, u.width)} != operator shape {op.shape}")
    u.validate_finite()
    return ScalarField(u.spacing, op.apply(u.values))


def cg_solve(
    apply_a,
    b: np.ndarray,
    tol: float = 1e-8,
    max_iter: int | None = None,
    diag: np.ndarray | None = None,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Preconditioned conjugate gradients for a symmetric positive definite
    operator given as a callable.

    Convergence is declared when ||b - A x||_2 <= tol * ||b||_2. diag, when
    given, is used as a Jacobi preconditioner. max_iter defaults to
    10 * (width + height). Raises SolverError (carrying the final relative
    residual) when the budget is exhausted.

    The implementation is deterministic: fixed operation order, no RNG.
    """
    b = np.asarray(b, dtype=np.float64)
    if max_iter is None:
        max_iter = 10 * (b.shape[0] + b.shape[1]) if b.ndim == 2 else 10 * b.size
    if tol <= 0.0:
        raise ConfigError(f"tol must be positive, got {tol}")

    b_norm = float(np.sqrt(np.vdot(b, b).real))
    if b_norm == 0.0:
        return np.zeros_like(b)

    x = b.copy() if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply_a(x)
    z = r / diag if diag is not None else r.copy()
    p = z.copy()
    rz = float(np.vdot(r, z).real)
    r_norm = float(np.sqrt(np.vdot(r, r).real))

    for _ in range(max_iter):
        if r_norm <= tol * b_norm:
            return x
        ap = apply_a(p)
        pap = float(np.vdot(p, ap).real)
        if pap <= 0.0:
            raise SolverError(
                f"operator not positive definite along search direction (pAp={pap:.3e})",
                residual=r_norm / b_norm,
            )
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        r_norm = float(np.sqrt(np.vdot(r, r).real))
        z = r / diag if diag is not None else r
        rz_next = float(np.vdot(r, z).real)
        beta = rz_next / rz
        rz = rz_next
        p = z + beta * p

    if r_norm <= tol * b_norm:
        return x
    raise SolverError(
        f"CG did not converge in {max_iter} iterations (rel residual {r_norm / b_norm:.3e})",
        residual=r_norm / b_norm,
        iterations=max_iter,
    )
