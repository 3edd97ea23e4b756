"""soctwin: a differentiable digital twin of tumor growth under standard-of-care
treatment.

The model is a 2D reaction-diffusion equation (diffusion + logistic growth +
chemotherapy kill) on an anatomy mask, punctuated by discrete surgery and
radiotherapy events. It is integrated with an unconditionally stable
implicit/exact split scheme, calibrated by a hand-rolled discrete adjoint and
Adam, exercised on synthetic cohorts, and served over HTTP for counterfactual
("what if we dropped radiotherapy") queries.
"""

__version__ = "0.1.0"

from .calibrate import (
    FitResult,
    LossConfig,
    OptimConfig,
    fit,
    grad_adjoint,
    grad_fd,
    kfold_split,
    patient_loss,
)
from .errors import (
    ConfigError,
    FormatError,
    ShapeError,
    SoctwinError,
    SolverError,
    StateError,
    ValidationError,
)
from .grid import DomainMask, LaplacianOperator, ScalarField, apply_laplacian, cg_solve
from .imex import BioParams, RolloutConfig, TwinState, rollout, threshold_mask
from .metrics import dsc, mae_rmse, mask_volume, time_to_progression
from .patient import Observation, PatientRecord
from .personalize import Covariates, ModulatorWeights, modulate
from .synth import CohortSpec, SyntheticPatient, TissueMap, gen_cohort, gen_phantom, simulate_and_render
from .therapy import ChemoCourse, RtFraction, SurgeryEvent, TreatmentTimeline

__all__ = [
    "__version__",
    "SoctwinError",
    "ShapeError",
    "ValidationError",
    "ConfigError",
    "SolverError",
    "FormatError",
    "StateError",
    "ScalarField",
    "DomainMask",
    "LaplacianOperator",
    "apply_laplacian",
    "cg_solve",
    "BioParams",
    "RolloutConfig",
    "TwinState",
    "rollout",
    "threshold_mask",
    "dsc",
    "mae_rmse",
    "mask_volume",
    "time_to_progression",
    "Observation",
    "PatientRecord",
    "Covariates",
    "ModulatorWeights",
    "modulate",
    "ChemoCourse",
    "RtFraction",
    "SurgeryEvent",
    "TreatmentTimeline",
    "LossConfig",
    "OptimConfig",
    "FitResult",
    "fit",
    "grad_adjoint",
    "grad_fd",
    "kfold_split",
    "patient_loss",
    "CohortSpec",
    "TissueMap",
    "SyntheticPatient",
    "gen_phantom",
    "simulate_and_render",
    "gen_cohort",
]
